//! Axis-aligned boxes, IoU, proposal labeling and box-delta coding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Log-space clamp applied to width/height deltas before exponentiation.
pub const MAX_LOG_DELTA: f64 = 4.0;

/// Axis-aligned box `[x1, y1, x2, y2]` with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "[{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds from `f64` corners; panics on an invalid box.
    pub fn from_corners(c: [f64; 4]) -> Self {
        Self::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2]), T::lit(c[3]))
            .expect("valid box corners")
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (self.x1 + half * self.width(), self.y1 + half * self.height())
    }
}

/// A ground-truth object. Class 0 is reserved for background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthInstance<T> {
    pub bbox: BBox<T>,
    class_id: usize,
}

impl<T: Scalar> GroundTruthInstance<T> {
    pub fn new(bbox: BBox<T>, class_id: usize) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::InvalidClass(class_id));
        }
        Ok(Self { bbox, class_id })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }
}

/// Assignment of a proposal to a ground-truth instance (or background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalLabel<T> {
    pub class_id: usize,
    pub max_iou: T,
    /// Index of the max-IoU ground truth. Set for positives; for
    /// background it records the best overlap when one exists.
    pub matched_gt: Option<usize>,
    /// Class of the max-IoU ground truth regardless of the threshold.
    pub nearest_class: Option<usize>,
    pub regression_target: Option<[T; 4]>,
}

impl<T: Scalar> ProposalLabel<T> {
    pub fn background() -> Self {
        Self {
            class_id: 0,
            max_iou: T::zero(),
            matched_gt: None,
            nearest_class: None,
            regression_target: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.class_id > 0
    }
}

/// Intersection over union of two valid boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    if a == b {
        return T::one();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

/// Labels each proposal with the class of its max-IoU ground truth when that
/// IoU reaches `pos_threshold` (inclusive); otherwise background. Ties go to
/// the lowest ground-truth index.
pub fn label_proposals<T: Scalar>(
    proposals: &[BBox<T>],
    gts: &[GroundTruthInstance<T>],
    pos_threshold: T,
) -> Vec<ProposalLabel<T>> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, T)> = None;
            for (j, gt) in gts.iter().enumerate() {
                let v = iou(p, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= pos_threshold => ProposalLabel {
                    class_id: gts[j].class_id,
                    max_iou: v,
                    matched_gt: Some(j),
                    nearest_class: Some(gts[j].class_id),
                    regression_target: Some(encode_deltas(p, &gts[j].bbox)),
                },
                Some((j, v)) if v > T::zero() => ProposalLabel {
                    class_id: 0,
                    max_iou: v,
                    matched_gt: None,
                    nearest_class: Some(gts[j].class_id),
                    regression_target: None,
                },
                _ => ProposalLabel::background(),
            }
        })
        .collect()
}

/// Center/size regression target `(tx, ty, tw, th)` taking `proposal` to `gt`.
pub fn encode_deltas<T: Scalar>(proposal: &BBox<T>, gt: &BBox<T>) -> [T; 4] {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gcx - pcx) / pw,
        (gcy - pcy) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; `tw`/`th` are clamped to [`MAX_LOG_DELTA`].
pub fn decode_box<T: Scalar>(proposal: &BBox<T>, deltas: &[T; 4]) -> BBox<T> {
    let clamp = T::lit(MAX_LOG_DELTA);
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + deltas[0] * pw;
    let cy = pcy + deltas[1] * ph;
    let w = pw * deltas[2].min(clamp).exp();
    let h = ph * deltas[3].min(clamp).exp();
    let half = T::lit(0.5);
    BBox {
        x1: cx - half * w,
        y1: cy - half * h,
        x2: cx + half * w,
        y2: cy + half * h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(c: [f64; 4]) -> BBox<f64> {
        BBox::from_corners(c)
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = b([0.0, 0.0, 2.0, 2.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b([0.0, 0.0, 1.0, 1.0]), &b([5.0, 5.0, 6.0, 6.0])), 0.0);
        // intersection 1, union 4 + 4 - 1 = 7
        let v = iou(&a, &b([1.0, 1.0, 3.0, 3.0]));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_touching_edges_is_zero() {
        assert_eq!(iou(&b([0.0, 0.0, 1.0, 1.0]), &b([1.0, 0.0, 2.0, 1.0])), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(GroundTruthInstance::new(b([0.0, 0.0, 1.0, 1.0]), 0).is_err());
    }

    #[test]
    fn labeling_examples() {
        let gt = vec![
            GroundTruthInstance::new(b([0.0, 0.0, 10.0, 10.0]), 3).unwrap(),
            GroundTruthInstance::new(b([50.0, 50.0, 60.0, 60.0]), 1).unwrap(),
        ];
        let props = vec![
            b([0.0, 0.0, 10.0, 10.0]),
            // overlaps the first gt with IoU 0.3
            b([0.0, 0.0, 10.0, 3.0]),
            b([80.0, 80.0, 90.0, 90.0]),
        ];
        let labels = label_proposals(&props, &gt, 0.5);
        assert_eq!(labels[0].class_id, 3);
        assert_eq!(labels[0].max_iou, 1.0);
        assert_eq!(labels[0].matched_gt, Some(0));
        assert_eq!(labels[0].regression_target, Some([0.0; 4]));
        assert_eq!(labels[1].class_id, 0);
        assert!((labels[1].max_iou - 0.3).abs() < 1e-12);
        assert!(labels[1].regression_target.is_none());
        assert_eq!(labels[2], ProposalLabel::background());

        let none = label_proposals::<f64>(&props, &[], 0.5);
        assert!(none.iter().all(|l| l.class_id == 0 && l.max_iou == 0.0));
    }

    #[test]
    fn labeling_threshold_is_inclusive_and_ties_pick_lowest_index() {
        let g = b([0.0, 0.0, 10.0, 10.0]);
        let gts = vec![
            GroundTruthInstance::new(g, 2).unwrap(),
            GroundTruthInstance::new(g, 1).unwrap(),
        ];
        // IoU exactly 0.5: half-width box inside the gt
        let p = b([0.0, 0.0, 5.0, 10.0]);
        let l = label_proposals(&[p], &gts, 0.5);
        assert_eq!(l[0].class_id, 2);
        assert_eq!(l[0].matched_gt, Some(0));
    }

    #[test]
    fn encode_decode_examples() {
        let p = b([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(encode_deltas(&p, &p), [0.0; 4]);
        assert_eq!(encode_deltas(&p, &b([5.0, 0.0, 15.0, 10.0])), [0.5, 0.0, 0.0, 0.0]);
        assert_eq!(decode_box(&p, &[0.0; 4]), p);
        assert_eq!(decode_box(&p, &[0.5, 0.0, 0.0, 0.0]), b([5.0, 0.0, 15.0, 10.0]));
        let wide = decode_box(&p, &[0.0, 0.0, 10.0, 0.0]);
        assert!((wide.width() - 10.0 * 4f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn works_in_single_precision() {
        let a = BBox::<f32>::from_corners([0.0, 0.0, 2.0, 2.0]);
        let c = BBox::<f32>::from_corners([1.0, 1.0, 3.0, 3.0]);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-6);
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| b([x, y, x + w, y + h]))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn encode_decode_round_trip(p in arb_box(), g in arb_box()) {
            let d = encode_deltas(&p, &g);
            prop_assume!(d[2].abs() <= MAX_LOG_DELTA && d[3].abs() <= MAX_LOG_DELTA);
            let back = decode_box(&p, &encode_deltas(&p, &g));
            for (x, y) in back.corners().iter().zip(g.corners()) {
                prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", back, g);
            }
        }

        #[test]
        fn raising_threshold_never_creates_positives(
            props in proptest::collection::vec(arb_box(), 1..20),
            gts in proptest::collection::vec(arb_box(), 0..5),
            lo in 0.05..0.9f64,
            bump in 0.0..0.5f64,
        ) {
            let gts: Vec<_> = gts.into_iter()
                .map(|bb| GroundTruthInstance::new(bb, 1).unwrap()).collect();
            let low = label_proposals(&props, &gts, lo);
            let high = label_proposals(&props, &gts, (lo + bump).min(0.99));
            for (l, h) in low.iter().zip(&high) {
                prop_assert!(!(l.class_id == 0 && h.class_id > 0));
            }
        }
    }
}
