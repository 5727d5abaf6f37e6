//! Anchor grids, ltrb-exp box decoding and IoU with its analytic gradient.
//!
//! An offset row `(o_l, o_t, o_r, o_b)` at anchor center `(cx, cy)` decodes to
//! the box `(cx - s·e^{o_l}, cy - s·e^{o_t}, cx + s·e^{o_r}, cy + s·e^{o_b})`
//! where `s` is the grid stride. The exponential keeps every decoded box
//! valid for any real offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Grid2;

/// Axis-aligned box in image pixels with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::invalid(format!("box {b:?} has non-finite corners")));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::invalid(format!("box {b:?} has non-positive extent")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Strict interior test; points on an edge are outside.
    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        self.x1 < x && x < self.x2 && self.y1 < y && y < self.y2
    }

    /// Clips to `[0, w] × [0, h]`, or `None` if nothing of positive area is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let c = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        (c.x1 < c.x2 && c.y1 < c.y2).then_some(c)
    }
}

/// Anchor centers of a single stride level, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    points: Vec<(f64, f64)>,
    stride: f64,
    image_w: usize,
    image_h: usize,
}

impl AnchorGrid {
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_w, self.image_h)
    }

    /// `(rows, cols)` of the anchor lattice.
    pub fn grid_shape(&self) -> (usize, usize) {
        let s = self.stride as usize;
        (self.image_h / s, self.image_w / s)
    }
}

pub fn build_anchor_grid(image_w: usize, image_h: usize, stride: usize) -> Result<AnchorGrid> {
    if stride == 0 || image_w == 0 || image_h == 0 {
        return Err(Error::invalid("image size and stride must be positive"));
    }
    if !image_w.is_multiple_of(stride) || !image_h.is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "stride {stride} does not divide image {image_w}x{image_h}"
        )));
    }
    let s = stride as f64;
    let points = (0..image_h / stride)
        .flat_map(|i| (0..image_w / stride).map(move |j| ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)))
        .collect();
    Ok(AnchorGrid {
        points,
        stride: s,
        image_w,
        image_h,
    })
}

/// Decodes one offset row around `center`.
pub fn decode_one(center: (f64, f64), stride: f64, offsets: &[f64]) -> BBox {
    let (cx, cy) = center;
    BBox {
        x1: cx - stride * offsets[0].exp(),
        y1: cy - stride * offsets[1].exp(),
        x2: cx + stride * offsets[2].exp(),
        y2: cy + stride * offsets[3].exp(),
    }
}

/// Inverse of [`decode_one`]: `o_k = ln(d_k / stride)`.
pub fn encode_one(center: (f64, f64), stride: f64, target: &BBox) -> Result<[f64; 4]> {
    let (cx, cy) = center;
    let d = [cx - target.x1, cy - target.y1, target.x2 - cx, target.y2 - cy];
    if d.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(format!(
            "anchor ({cx}, {cy}) is not strictly inside {target:?}"
        )));
    }
    Ok(d.map(|v| (v / stride).ln()))
}

pub fn decode_boxes(anchors: &AnchorGrid, offsets: &Grid2) -> Result<Vec<BBox>> {
    if offsets.cols() != 4 {
        return Err(Error::invalid(format!(
            "offset map has {} columns, expected 4",
            offsets.cols()
        )));
    }
    if offsets.rows() != anchors.len() {
        return Err(Error::invalid(format!(
            "offset map has {} rows for {} anchors",
            offsets.rows(),
            anchors.len()
        )));
    }
    Ok(anchors
        .points()
        .iter()
        .zip(offsets.iter_rows())
        .map(|(&c, o)| decode_one(c, anchors.stride(), o))
        .collect())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// IoU between the box decoded from `student_offsets` and a fixed `target`
/// box, plus its gradient with respect to the four student offsets.
///
/// Where a student edge coincides with the target edge the intersection is
/// not differentiable; the derivative returned is the one-sided value from
/// the branch where the student edge lies inside the target.
pub fn iou_grad_wrt_offsets(
    center: (f64, f64),
    stride: f64,
    student_offsets: &[f64],
    target: &BBox,
) -> (f64, [f64; 4]) {
    let b = decode_one(center, stride, student_offsets);
    let ix1 = b.x1.max(target.x1);
    let iy1 = b.y1.max(target.y1);
    let ix2 = b.x2.min(target.x2);
    let iy2 = b.y2.min(target.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let w = b.width();
    let h = b.height();
    let inter = iw * ih;
    let union = w * h + target.area() - inter;
    let value = inter / union;

    // ∂I/∂edge is non-zero only when that student edge bounds the intersection.
    let d_inter = [
        if b.x1 >= target.x1 { -ih } else { 0.0 },
        if b.y1 >= target.y1 { -iw } else { 0.0 },
        if b.x2 <= target.x2 { ih } else { 0.0 },
        if b.y2 <= target.y2 { iw } else { 0.0 },
    ];
    let d_area = [-h, -w, h, w];
    // Edge derivative of each coordinate w.r.t. its offset: ±s·e^{o}.
    let d_edge = [
        -(center.0 - b.x1),
        -(center.1 - b.y1),
        b.x2 - center.0,
        b.y2 - center.1,
    ];
    let u2 = union * union;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_iou_edge = (d_inter[k] * (union + inter) - inter * d_area[k]) / u2;
        grad[k] = d_iou_edge * d_edge[k];
    }
    (value, grad)
}

/// IoU between student- and teacher-decoded boxes at one anchor and its
/// gradient with respect to the student offsets.
pub fn iou_grad_student(
    center: (f64, f64),
    stride: f64,
    teacher_offsets: &[f64],
    student_offsets: &[f64],
) -> (f64, [f64; 4]) {
    let target = decode_one(center, stride, teacher_offsets);
    iou_grad_wrt_offsets(center, stride, student_offsets, &target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_gradients, finite_diff_grad};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchor_grid_enumeration() {
        let g = build_anchor_grid(16, 16, 8).unwrap();
        assert_eq!(g.points(), &[(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
        let g = build_anchor_grid(8, 8, 8).unwrap();
        assert_eq!(g.points(), &[(4.0, 4.0)]);
        let g = build_anchor_grid(64, 64, 8).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(g.points()[0], (4.0, 4.0));
        assert_eq!(g.points()[63], (60.0, 60.0));
        assert_eq!(g.grid_shape(), (8, 8));
    }

    #[test]
    fn anchor_grid_rejects_non_divisible() {
        assert!(matches!(build_anchor_grid(20, 16, 8), Err(Error::InvalidInput(_))));
        assert!(build_anchor_grid(16, 16, 0).is_err());
    }

    #[test]
    fn decode_examples() {
        let b = decode_one((4.0, 4.0), 8.0, &[0.0; 4]);
        assert_eq!(b, bb(-4.0, -4.0, 12.0, 12.0));
        let ln2 = std::f64::consts::LN_2;
        let b = decode_one((32.0, 32.0), 8.0, &[ln2; 4]);
        for (got, want) in [b.x1, b.y1, b.x2, b.y2].iter().zip([16.0, 16.0, 48.0, 48.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_boxes_rejects_wrong_columns() {
        let g = build_anchor_grid(16, 16, 8).unwrap();
        assert!(decode_boxes(&g, &Grid2::zeros(4, 3)).is_err());
        assert!(decode_boxes(&g, &Grid2::zeros(3, 4)).is_err());
        assert_eq!(decode_boxes(&g, &Grid2::zeros(4, 4)).unwrap().len(), 4);
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&a, &bb(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() <= 1e-12);
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn encode_inverts_decode() {
        let target = bb(-4.0, 3.0, 12.0, 12.0);
        let o = encode_one((4.0, 4.0), 8.0, &target).unwrap();
        assert!((o[0] - 1.0f64.ln()).abs() < 1e-15);
        let back = decode_one((4.0, 4.0), 8.0, &o);
        assert!((back.x1 - target.x1).abs() < 1e-9 && (back.y1 - target.y1).abs() < 1e-9);
        assert!((back.x2 - target.x2).abs() < 1e-9 && (back.y2 - target.y2).abs() < 1e-9);
        assert!(matches!(
            encode_one((4.0, 4.0), 8.0, &bb(4.0, 0.0, 10.0, 10.0)),
            Err(Error::Domain(_))
        ));
    }

    fn fd_iou_grad(center: (f64, f64), stride: f64, t: &[f64], s: &[f64]) -> Grid2 {
        let x = Grid2::from_vec(1, 4, s.to_vec()).unwrap();
        finite_diff_grad(
            |g| iou_grad_student(center, stride, t, g.data()).0,
            &x,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn identical_offsets_use_inside_branch() {
        let t = [0.1, -0.2, 0.3, 0.05];
        let (v, g) = iou_grad_student((20.0, 20.0), 8.0, &t, &t);
        assert_eq!(v, 1.0);
        // Shrinking any side (decreasing its offset) lowers IoU: compare to a
        // backward one-sided difference.
        let h = 1e-6;
        for k in 0..4 {
            let mut s = t;
            s[k] -= h;
            let (v_minus, _) = iou_grad_student((20.0, 20.0), 8.0, &t, &s);
            let fd = (v - v_minus) / h;
            assert!(-g[k] <= 0.0, "shrink derivative must be ≤ 0");
            assert!((fd - g[k]).abs() <= 1e-3 * g[k].abs(), "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn disjoint_boxes_have_zero_gradient() {
        let t = [-1.0; 4];
        let s = [-1.0; 4];
        // Teacher decoded around (4,4), student around (60,60): no overlap.
        let target = decode_one((4.0, 4.0), 8.0, &t);
        let (v, g) = iou_grad_wrt_offsets((60.0, 60.0), 8.0, &s, &target);
        assert_eq!(v, 0.0);
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn gradient_matches_fd_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 1000 {
            let t: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt = decode_one((32.0, 32.0), 8.0, &t);
            let bs = decode_one((32.0, 32.0), 8.0, &s);
            // Skip configurations within FD reach of a kink.
            let near_kink = [bt.x1 - bs.x1, bt.y1 - bs.y1, bt.x2 - bs.x2, bt.y2 - bs.y2]
                .iter()
                .any(|d| d.abs() < 1e-3);
            if near_kink {
                continue;
            }
            let (_, g) = iou_grad_student((32.0, 32.0), 8.0, &t, &s);
            let analytic = Grid2::from_vec(1, 4, g.to_vec()).unwrap();
            let numeric = fd_iou_grad((32.0, 32.0), 8.0, &t, &s);
            let r = compare_gradients(&analytic, &numeric, 1e-4).unwrap();
            assert!(r.passed, "t={t:?} s={s:?} {r:?}");
            checked += 1;
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0f64..50.0, -50.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_monotone_under_containment(
            a in arb_box(),
            grow1 in proptest::array::uniform4(0.0f64..10.0),
            grow2 in proptest::array::uniform4(0.0f64..10.0),
        ) {
            let b = BBox { x1: a.x1 - grow1[0], y1: a.y1 - grow1[1], x2: a.x2 + grow1[2], y2: a.y2 + grow1[3] };
            let c = BBox { x1: b.x1 - grow2[0], y1: b.y1 - grow2[1], x2: b.x2 + grow2[2], y2: b.y2 + grow2[3] };
            prop_assert!(iou(&a, &c) <= iou(&a, &b) + 1e-15);
        }

        #[test]
        fn decoding_is_injective(
            o1 in proptest::array::uniform4(-3.0f64..3.0),
            o2 in proptest::array::uniform4(-3.0f64..3.0),
        ) {
            let b1 = decode_one((12.0, 20.0), 8.0, &o1);
            let b2 = decode_one((12.0, 20.0), 8.0, &o2);
            prop_assert!(b1.x1 < b1.x2 && b1.y1 < b1.y2);
            prop_assert_eq!(b1 == b2, o1 == o2);
        }
    }
}
