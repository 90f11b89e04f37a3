//! Mask overlap and point accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::pointbranch::PointPrediction;
use crate::types::{BinaryMask, BleedAnnotation};

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    assert_eq!(pred.dim(), gt.dim(), "mask shapes differ");
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    (inter, p, g)
}

/// `|∩| / |∪|`, 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (i, p, g) = counts(pred, gt);
    let u = p + g - i;
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// `2|∩| / (|p| + |g|)`, 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (i, p, g) = counts(pred, gt);
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

/// Whether a frame with a ground-truth point counts as correct at fraction
/// `k` of the image diagonal. The boundary is inclusive.
pub fn point_correct(pred: &PointPrediction, gt: &BleedAnnotation, k: f64, dims: (usize, usize), threshold: f64) -> Option<bool> {
    let g = gt.point?;
    if !pred.present(threshold) {
        return Some(false);
    }
    let (h, w) = dims;
    let diag = ((h * h + w * w) as f64).sqrt();
    Some(pred.pixel(h, w).distance(&g) <= k * diag)
}

/// Fraction of frames with a ground-truth point that are correct; `None`
/// when no frame has one.
pub fn pck(preds: &[PointPrediction], gts: &[BleedAnnotation], k: f64, dims: (usize, usize), threshold: f64) -> Option<f64> {
    let mut eligible = 0usize;
    let mut correct = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if let Some(ok) = point_correct(p, g, k, dims, threshold) {
            eligible += 1;
            correct += ok as usize;
        }
    }
    (eligible > 0).then(|| correct as f64 / eligible as f64)
}

/// Counts for existence precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExistenceCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ExistenceCounts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &ExistenceCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Predicted bleed area as a fraction of the image.
pub fn area_rate(pred: &BinaryMask) -> f64 {
    pred.iter().filter(|&&b| b).count() as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn block(r: usize, c: usize) -> BinaryMask {
        let mut m = Array2::from_elem((6, 6), false);
        for i in r..r + 2 {
            for j in c..c + 2 {
                m[[i, j]] = true;
            }
        }
        m
    }

    #[test]
    fn iou_and_dice_cases() {
        let a = block(1, 1);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(dice_score(&a, &a), 1.0);
        assert_eq!(iou(&a, &block(4, 4)), 0.0);
        assert_eq!(dice_score(&a, &block(4, 4)), 0.0);
        let b = block(1, 2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!((dice_score(&a, &b) - 0.5).abs() < 1e-15);
        let e = Array2::from_elem((6, 6), false);
        assert_eq!(iou(&e, &e), 1.0);
    }

    fn pred(x: f64, y: f64, score: f64) -> PointPrediction {
        PointPrediction {
            coord: [x, y],
            score,
            frame_index: 0,
        }
    }

    #[test]
    fn pck_cases() {
        let dims = (30, 40); // diagonal 50
        let gt = |x, y| BleedAnnotation::new(None, Some(Point::new(x, y)));
        // exact
        assert_eq!(pck(&[pred(0.5, 0.5, 0.9)], &[gt(20.0, 15.0)], 0.02, dims, 0.5), Some(1.0));
        // distance exactly k·diag = 2.5 px horizontally
        assert_eq!(pck(&[pred(22.5 / 40.0, 0.5, 0.9)], &[gt(20.0, 15.0)], 0.05, dims, 0.5), Some(1.0));
        // errors {0, 0.04, 0.2}·diag at k=5%
        let preds = [pred(0.5, 0.5, 0.9), pred(22.0 / 40.0, 0.5, 0.9), pred(30.0 / 40.0, 0.5, 0.9)];
        let gts = [gt(20.0, 15.0), gt(20.0, 15.0), gt(20.0, 15.0)];
        assert!((pck(&preds, &gts, 0.05, dims, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // declared absent counts as wrong; no eligible frames gives None
        assert_eq!(pck(&[pred(0.5, 0.5, 0.1)], &[gt(20.0, 15.0)], 0.1, dims, 0.5), Some(0.0));
        assert_eq!(pck(&[pred(0.5, 0.5, 0.9)], &[BleedAnnotation::empty()], 0.1, dims, 0.5), None);
    }

    #[test]
    fn existence_counts() {
        let mut c = ExistenceCounts::default();
        c.add(true, true);
        c.add(true, false);
        c.add(false, true);
        c.add(false, true);
        assert_eq!(c.precision(), Some(0.5));
        assert!((c.recall().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ExistenceCounts::default().precision(), None);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(a in proptest::collection::vec(any::<bool>(), 64), b in proptest::collection::vec(any::<bool>(), 64)) {
            let a = Array2::from_shape_vec((8, 8), a).unwrap();
            let b = Array2::from_shape_vec((8, 8), b).unwrap();
            let j = iou(&a, &b);
            prop_assert!((dice_score(&a, &b) - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }

        #[test]
        fn pck_monotone(errs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)) {
            let dims = (64, 64);
            let preds: Vec<_> = errs.iter().map(|&(x, y, s)| pred(x, y, s)).collect();
            let gts: Vec<_> = errs.iter().map(|_| BleedAnnotation::new(None, Some(Point::new(32.0, 32.0)))).collect();
            let mut prev = 0.0;
            for k in [0.01, 0.02, 0.05, 0.1, 0.3, 1.0] {
                let v = pck(&preds, &gts, k, dims, 0.5).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }
}
