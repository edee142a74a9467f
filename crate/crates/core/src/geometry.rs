//! Box arithmetic, delta coding, bilinear RoI pooling, and feature-pyramid
//! level assignment.

use crate::error::{Error, Result};
use crate::tensor::{Tap, Tensor};

/// Axis-aligned box in image pixels, center form. Width and height are
/// strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Parameter(format!(
                "box size must be positive, got {w}x{h}"
            )));
        }
        Ok(Box { cx, cy, w, h })
    }

    /// From corners (x1, y1, x2, y2) with x2 > x1, y2 > y1.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Box::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clip to an image of the given size, keeping at least 1 px of extent.
    /// Boxes already inside the image are returned unchanged, bit for bit.
    pub fn clip(&self, width: f64, height: f64) -> Box {
        let (x1, y1, x2, y2) = self.corners();
        if x1 >= 0.0 && y1 >= 0.0 && x2 <= width && y2 <= height {
            return *self;
        }
        let x1 = x1.clamp(0.0, width - 1.0);
        let y1 = y1.clamp(0.0, height - 1.0);
        let x2 = x2.clamp(x1 + 1.0, width);
        let y2 = y2.clamp(y1 + 1.0, height);
        Box {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

/// Pyramid level assigned to one RoI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelAssignment {
    pub roi: usize,
    pub level: usize,
}

/// Intersection over union; 0 for disjoint boxes. Areas are taken from the
/// same corner-derived extents as the intersection, so iou(a, a) is exactly 1.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    inter / (area_a + area_b - inter)
}

/// Regression targets taking `proposal` onto `target`:
/// ((t.cx−p.cx)/p.w, (t.cy−p.cy)/p.h, ln(t.w/p.w), ln(t.h/p.h)).
pub fn encode_deltas(proposal: &Box, target: &Box) -> [f64; 4] {
    [
        (target.cx - proposal.cx) / proposal.w,
        (target.cy - proposal.cy) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
    ]
}

/// Log-scale terms are clamped to ±4 before exponentiation so early training
/// cannot explode box sizes; decoded extents are kept at ≥ 1 px.
const DELTA_CLAMP: f64 = 4.0;

/// Exact inverse of [`encode_deltas`] inside the clamp range.
pub fn decode_deltas(proposal: &Box, deltas: &[f64; 4]) -> Box {
    let w = proposal.w * deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = proposal.h * deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    Box {
        cx: proposal.cx + deltas[0] * proposal.w,
        cy: proposal.cy + deltas[1] * proposal.h,
        w: w.max(1.0),
        h: h.max(1.0),
    }
}

/// Bilinear sample stencils for pooling `box_` from a feature plane.
///
/// One sample per bin at the bin center, pixel centers at (col + 0.5,
/// row + 0.5) in feature coordinates; samples outside the plane clamp to the
/// border. The stencils are shared across channels.
pub fn roi_align_taps(box_: &Box, stride: f64, s: usize, fh: usize, fw: usize) -> Vec<[Tap; 4]> {
    let (x1, y1, x2, y2) = box_.corners();
    let fx1 = x1 / stride;
    let fy1 = y1 / stride;
    let bin_w = (x2 - x1) / stride / s as f64;
    let bin_h = (y2 - y1) / stride / s as f64;
    let mut taps = Vec::with_capacity(s * s);
    for by in 0..s {
        for bx in 0..s {
            let sx = fx1 + (bx as f64 + 0.5) * bin_w;
            let sy = fy1 + (by as f64 + 0.5) * bin_h;
            taps.push(bilinear_stencil(sx, sy, fh, fw));
        }
    }
    taps
}

fn bilinear_stencil(sx: f64, sy: f64, fh: usize, fw: usize) -> [Tap; 4] {
    // Shift into pixel-index space, clamp to the border.
    let gx = (sx - 0.5).clamp(0.0, (fw - 1) as f64);
    let gy = (sy - 0.5).clamp(0.0, (fh - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(fw - 1);
    let y1 = (y0 + 1).min(fh - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    [
        Tap {
            idx: y0 * fw + x0,
            weight: (1.0 - fy) * (1.0 - fx),
        },
        Tap {
            idx: y0 * fw + x1,
            weight: (1.0 - fy) * fx,
        },
        Tap {
            idx: y1 * fw + x0,
            weight: fy * (1.0 - fx),
        },
        Tap {
            idx: y1 * fw + x1,
            weight: fy * fx,
        },
    ]
}

/// Pool a [C,H,W] feature tensor over `box_` into [C,S,S].
pub fn roi_align(feature: &Tensor, box_: &Box, stride: f64, s: usize) -> Result<Tensor> {
    let shape = feature.shape();
    if shape.len() != 3 {
        return Err(Error::shape("roi_align", format!("feature {shape:?}")));
    }
    let (c, fh, fw) = (shape[0], shape[1], shape[2]);
    let taps = roi_align_taps(box_, stride, s, fh, fw);
    let plane = fh * fw;
    let fv = feature.data();
    let mut out = vec![0.0; c * s * s];
    for ci in 0..c {
        let fp = &fv[ci * plane..(ci + 1) * plane];
        for (k, stencil) in taps.iter().enumerate() {
            out[ci * s * s + k] = stencil.iter().map(|t| t.weight * fp[t.idx]).sum();
        }
    }
    Tensor::new(vec![c, s, s], out)
}

/// Centers of the S×S pooling bins in image coordinates.
pub fn roi_bin_centers(box_: &Box, s: usize) -> Vec<(f64, f64)> {
    let (x1, y1, _, _) = box_.corners();
    let bin_w = box_.w / s as f64;
    let bin_h = box_.h / s as f64;
    let mut centers = Vec::with_capacity(s * s);
    for by in 0..s {
        for bx in 0..s {
            centers.push((
                x1 + (bx as f64 + 0.5) * bin_w,
                y1 + (by as f64 + 0.5) * bin_h,
            ));
        }
    }
    centers
}

/// level = clamp(floor(k0 + log2(sqrt(w·h)/s0)), 0, P−1)
pub fn assign_pyramid_level(
    box_: &Box,
    level_count: usize,
    canonical_level: usize,
    canonical_size: f64,
) -> LevelAssignment {
    assert!(level_count >= 1, "need at least one pyramid level");
    let raw = canonical_level as f64 + (box_.area().sqrt() / canonical_size).log2();
    let level = raw.floor().clamp(0.0, (level_count - 1) as f64) as usize;
    LevelAssignment { roi: 0, level }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box {
        Box::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Box::new(0.0, 0.0, 1.0, -2.0).is_err());
    }

    #[test]
    fn corner_roundtrip_is_exact() {
        let a = b(10.0, 20.0, 4.0, 8.0);
        let (x1, y1, x2, y2) = a.corners();
        assert_eq!(Box::from_corners(x1, y1, x2, y2).unwrap(), a);
    }

    #[test]
    fn iou_identical_is_one() {
        let a = b(5.0, 5.0, 3.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_hand_case_one_third() {
        // Corners (0,0,2,2) vs (1,0,3,2): intersection 2, union 6.
        let a = Box::from_corners(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = Box::from_corners(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        let c = b(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn encode_identity_is_zero() {
        let p = b(10.0, 10.0, 4.0, 8.0);
        assert_eq!(encode_deltas(&p, &p), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_hand_case() {
        let p = b(10.0, 10.0, 4.0, 8.0);
        let t = b(12.0, 6.0, 8.0, 4.0);
        let d = encode_deltas(&p, &t);
        assert_eq!(d[0], 0.5);
        assert_eq!(d[1], -0.5);
        assert!((d[2] - 2.0f64.ln()).abs() < 1e-15);
        assert!((d[3] + 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decode_inverts_encode() {
        let p = b(10.0, 10.0, 4.0, 8.0);
        let t = b(12.0, 6.0, 8.0, 4.0);
        let back = decode_deltas(&p, &encode_deltas(&p, &t));
        assert!((back.cx - t.cx).abs() < 1e-12);
        assert!((back.cy - t.cy).abs() < 1e-12);
        assert!((back.w - t.w).abs() < 1e-12);
        assert!((back.h - t.h).abs() < 1e-12);
    }

    #[test]
    fn decode_clamps_to_one_pixel() {
        let p = b(10.0, 10.0, 4.0, 4.0);
        let out = decode_deltas(&p, &[0.0, 0.0, -10.0, -10.0]);
        assert_eq!(out.w, 1.0);
        assert_eq!(out.h, 1.0);
    }

    #[test]
    fn roi_align_constant_map() {
        let feat = Tensor::new(vec![2, 8, 8], vec![3.5; 2 * 64]).unwrap();
        let out = roi_align(&feat, &b(16.0, 16.0, 12.0, 12.0), 4.0, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn roi_align_integer_cells() {
        // Box covering feature cells [1..3)x[1..3) at stride 1, S=2:
        // samples land exactly on the four cell centers.
        let mut data = vec![0.0; 16];
        for (i, v) in data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let feat = Tensor::new(vec![1, 4, 4], data).unwrap();
        let box_ = Box::from_corners(1.0, 1.0, 3.0, 3.0).unwrap();
        let out = roi_align(&feat, &box_, 1.0, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn roi_align_linear_ramp() {
        // f(x, y) = x (pixel value = column index); bilinear pooling of a
        // linear field is linear in the sample coordinate: value = sx − 0.5.
        let mut data = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = x as f64;
            }
        }
        let feat = Tensor::new(vec![1, 8, 8], data).unwrap();
        let box_ = Box::from_corners(2.0, 2.0, 6.0, 6.0).unwrap();
        let s = 4;
        let out = roi_align(&feat, &box_, 1.0, s).unwrap();
        let bin = 4.0 / s as f64;
        for by in 0..s {
            for bx in 0..s {
                let sx = 2.0 + (bx as f64 + 0.5) * bin;
                assert!((out.data()[by * s + bx] - (sx - 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_assignment_canonical_and_octaves() {
        let p = 4;
        let (k0, s0) = (2, 56.0);
        let at = |side: f64| assign_pyramid_level(&b(0.0, 0.0, side, side), p, k0, s0).level;
        assert_eq!(at(56.0), 2);
        assert_eq!(at(112.0), 3);
        assert_eq!(at(10_000.0), p - 1);
        assert_eq!(at(1.0), 0);
    }

    #[test]
    fn clip_keeps_minimum_extent() {
        let clipped = b(100.0, 100.0, 10.0, 10.0).clip(64.0, 64.0);
        assert!(clipped.w >= 1.0 && clipped.h >= 1.0);
        let (x1, y1, x2, y2) = clipped.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
    }
}
