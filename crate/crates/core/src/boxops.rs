//! Box representations and the IoU/GIoU geometry shared by matching, losses
//! and evaluation. Coordinates are fractions of the image side.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Boxes with `w·h` below this are treated as degenerate.
pub const MIN_AREA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWH {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BoxCxCyWH {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn area(self) -> f32 {
        self.w * self.h
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Corner form, clamped to the unit square.
    pub fn to_xyxy(self) -> Result<BoxXYXY> {
        if !self.is_finite() {
            return Err(Error::Invalid(format!("non-finite box {self:?}")));
        }
        let c = |v: f32| v.clamp(0.0, 1.0);
        Ok(BoxXYXY {
            x0: c(self.cx - 0.5 * self.w),
            y0: c(self.cy - 0.5 * self.h),
            x1: c(self.cx + 0.5 * self.w),
            y1: c(self.cy + 0.5 * self.h),
        })
    }

    pub fn validate(self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::Invalid(format!("non-finite box {self:?}")));
        }
        if (self.w as f64) * (self.h as f64) < MIN_AREA {
            return Err(Error::DegenerateBox(format!("{self:?}")));
        }
        Ok(self)
    }
}

impl BoxXYXY {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_cxcywh(self) -> Result<BoxCxCyWH> {
        let v = [self.x0, self.y0, self.x1, self.y1];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite box {self:?}")));
        }
        Ok(BoxCxCyWH {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        })
    }

    pub fn area(self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// (IoU, GIoU) of two (cx, cy, w, h) boxes, generic over precision. No
/// degeneracy check; callers validate first.
pub fn iou_giou_cxcywh<T: Scalar>(a: &[T], b: &[T]) -> (T, T) {
    let half = T::of(0.5);
    let corners = |v: &[T]| {
        (
            v[0] - half * v[2],
            v[1] - half * v[3],
            v[0] + half * v[2],
            v[1] + half * v[3],
        )
    };
    iou_giou_corners(corners(a), corners(b))
}

fn iou_giou_corners<T: Scalar>(a: (T, T, T, T), b: (T, T, T, T)) -> (T, T) {
    let zero = T::zero();
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(zero);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(zero);
    let inter = iw * ih;
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    let iou = inter / union;
    let ew = a.2.max(b.2) - a.0.min(b.0);
    let eh = a.3.max(b.3) - a.1.min(b.1);
    let encl = ew * eh;
    (iou, iou - (encl - union) / encl)
}

fn check_area(x: BoxXYXY) -> Result<()> {
    if (x.area() as f64) < MIN_AREA {
        return Err(Error::DegenerateBox(format!("{x:?}")));
    }
    Ok(())
}

/// (IoU, GIoU) in corner form, computed in 64-bit.
pub fn giou(a: BoxXYXY, b: BoxXYXY) -> Result<(f64, f64)> {
    check_area(a)?;
    check_area(b)?;
    let c = |x: BoxXYXY| (x.x0 as f64, x.y0 as f64, x.x1 as f64, x.y1 as f64);
    Ok(iou_giou_corners(c(a), c(b)))
}

/// Plain IoU in 64-bit; 0 when either box is empty.
pub fn iou(a: BoxXYXY, b: BoxXYXY) -> f64 {
    if (a.area() as f64) < MIN_AREA || (b.area() as f64) < MIN_AREA {
        return 0.0;
    }
    let c = |x: BoxXYXY| (x.x0 as f64, x.y0 as f64, x.x1 as f64, x.y1 as f64);
    iou_giou_corners(c(a), c(b)).0
}

/// Regression cost between a target and a predicted box: (Σ|Δ| over cx, cy,
/// w, h; 1 − GIoU).
pub fn box_cost(target: BoxCxCyWH, pred: BoxCxCyWH) -> Result<(f64, f64)> {
    target.validate()?;
    pred.validate()?;
    let (t, p) = (target.to_array(), pred.to_array());
    let l1 = t
        .iter()
        .zip(&p)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let p64: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let (_, g) = iou_giou_cxcywh(&t64, &p64);
    Ok((l1, 1.0 - g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn xyxy(x0: f32, y0: f32, x1: f32, y1: f32) -> BoxXYXY {
        BoxXYXY::new(x0, y0, x1, y1)
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(
            BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0).to_xyxy().unwrap(),
            xyxy(0.0, 0.0, 1.0, 1.0)
        );
        assert_eq!(
            BoxCxCyWH::new(0.25, 0.25, 0.5, 0.5).to_xyxy().unwrap(),
            xyxy(0.0, 0.0, 0.5, 0.5)
        );
        assert!(BoxCxCyWH::new(f32::NAN, 0.5, 0.1, 0.1).to_xyxy().is_err());
    }

    #[test]
    fn giou_examples() {
        let a = xyxy(0.0, 0.0, 0.5, 0.5);
        assert_eq!(giou(a, a).unwrap(), (1.0, 1.0));

        let (i, g) = giou(a, xyxy(0.5, 0.5, 1.0, 1.0)).unwrap();
        assert_eq!(i, 0.0);
        assert!((g + 0.5).abs() < 1e-12);

        let (i, g) = giou(xyxy(0.0, 0.0, 1.0, 1.0), xyxy(0.0, 0.0, 0.5, 1.0)).unwrap();
        assert_eq!((i, g), (0.5, 0.5));
    }

    #[test]
    fn zero_area_is_rejected() {
        let flat = xyxy(0.2, 0.2, 0.2, 0.6);
        assert!(matches!(
            giou(flat, xyxy(0.0, 0.0, 1.0, 1.0)),
            Err(Error::DegenerateBox(_))
        ));
        assert!(box_cost(BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2), BoxCxCyWH::new(0.5, 0.5, 0.0, 0.3)).is_err());
    }

    #[test]
    fn box_cost_examples() {
        let b = BoxCxCyWH::new(0.4, 0.5, 0.2, 0.3);
        assert_eq!(box_cost(b, b).unwrap(), (0.0, 0.0));
        let shifted = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.3);
        let (l1, _) = box_cost(b, shifted).unwrap();
        assert!((l1 - 0.1).abs() < 1e-6);
    }

    fn any_box() -> impl Strategy<Value = BoxCxCyWH> {
        (0.05f32..0.95, 0.05f32..0.95, 0.01f32..0.9, 0.01f32..0.9)
            .prop_map(|(cx, cy, w, h)| BoxCxCyWH::new(cx, cy, w, h))
    }

    fn inside_box() -> impl Strategy<Value = BoxXYXY> {
        (0.0f32..0.8, 0.0f32..0.8, 0.02f32..0.2, 0.02f32..0.2)
            .prop_map(|(x, y, w, h)| xyxy(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(x in 0.0f32..0.7, y in 0.0f32..0.7, w in 0.01f32..0.3, h in 0.01f32..0.3) {
            let b = xyxy(x, y, x + w, y + h);
            let back = b.to_cxcywh().unwrap().to_xyxy().unwrap();
            prop_assert!((back.x0 - b.x0).abs() < 1e-6);
            prop_assert!((back.y0 - b.y0).abs() < 1e-6);
            prop_assert!((back.x1 - b.x1).abs() < 1e-6);
            prop_assert!((back.y1 - b.y1).abs() < 1e-6);
        }

        #[test]
        fn giou_is_symmetric_and_bounded(a in inside_box(), b in inside_box()) {
            let (i1, g1) = giou(a, b).unwrap();
            let (i2, g2) = giou(b, a).unwrap();
            prop_assert_eq!(i1.to_bits(), i2.to_bits());
            prop_assert_eq!(g1.to_bits(), g2.to_bits());
            prop_assert!(g1 <= i1);
            prop_assert!(g1 > -1.0 && g1 <= 1.0);
            prop_assert!((0.0..=1.0).contains(&i1));
        }

        #[test]
        fn giou_is_scale_invariant(a in inside_box(), b in inside_box(), s in 0.1f32..=1.0) {
            let sc = |x: BoxXYXY| xyxy(x.x0 * s, x.y0 * s, x.x1 * s, x.y1 * s);
            let (i1, g1) = giou(a, b).unwrap();
            let (i2, g2) = giou(sc(a), sc(b)).unwrap();
            prop_assert!((i1 - i2).abs() < 1e-6);
            prop_assert!((g1 - g2).abs() < 1e-6);
        }

        #[test]
        fn giou_cost_range(a in any_box(), b in any_box()) {
            let (l1, gc) = box_cost(a, b).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!((0.0..2.0).contains(&gc));
        }
    }
}
