//! Boxes, proposals and the difference-of-feature map.
//!
//! An image carries a list of candidate windows (proposals), each with a
//! precomputed feature vector. Localization is learned as a ranking problem
//! inside one image: proposals that overlap the ground truth by at least the
//! IoU threshold form the positive set, and the positive with the smallest
//! overlap (the "barely correct" window) is the reference every other
//! proposal is compared against through `diff_feature`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// IoU threshold separating correct from incorrect windows.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box in corner convention, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidInput(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
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

    fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Intersection over union. Boxes are valid by construction, so this cannot fail.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

/// One image with its candidate windows. Proposal 0 is always the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: ImageId,
    pub label: Label,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<Proposal>,
    pub gt_boxes: Vec<BoundingBox>,
}

impl ImageSample {
    /// Index of the whole-image proposal.
    pub const FULL_IMAGE: usize = 0;

    /// Validates the record. `dim` is the feature dimension of the owning pool.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.proposals.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "image {} has {} proposals, need at least 2",
                self.id,
                self.proposals.len()
            )));
        }
        if self.label == Label::Positive && self.gt_boxes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "positive image {} has no ground-truth box",
                self.id
            )));
        }
        if self.proposals[Self::FULL_IMAGE].bbox != self.full_box()? {
            return Err(Error::InvalidInput(format!(
                "image {}: proposal 0 is not the full image",
                self.id
            )));
        }
        for p in &self.proposals {
            if p.feature.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.feature.len(),
                });
            }
            if p.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "image {}: non-finite feature value",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn full_box(&self) -> Result<BoundingBox> {
        BoundingBox::new(0.0, 0.0, self.width, self.height)
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }

    pub fn feature(&self, index: usize) -> Result<&[f64]> {
        self.proposals
            .get(index)
            .map(|p| p.feature.as_slice())
            .ok_or(Error::IndexOutOfRange {
                image: self.id,
                index,
                len: self.proposals.len(),
            })
    }

    /// Best IoU of proposal `index` against any ground-truth box (0 for negatives).
    pub fn best_iou(&self, index: usize) -> f64 {
        let b = &self.proposals[index].bbox;
        self.gt_boxes.iter().map(|g| iou(b, g)).fold(0.0, f64::max)
    }
}

/// Indices of the proposals overlapping some ground-truth box by at least
/// `threshold`. Always empty for negative images.
pub fn positive_set(img: &ImageSample, threshold: f64) -> Vec<usize> {
    if !img.is_positive() {
        return Vec::new();
    }
    (0..img.proposals.len())
        .filter(|&i| img.best_iou(i) >= threshold)
        .collect()
}

/// The reference window `y_i`: the member of `pos` with the smallest overlap
/// (ties to the lowest index), or the full image for negatives.
pub fn select_y_i(img: &ImageSample, pos: &[usize]) -> Result<usize> {
    if !img.is_positive() {
        return Ok(ImageSample::FULL_IMAGE);
    }
    let mut best: Option<(usize, f64)> = None;
    for &i in pos {
        if i >= img.proposals.len() {
            return Err(Error::IndexOutOfRange {
                image: img.id,
                index: i,
                len: img.proposals.len(),
            });
        }
        let o = img.best_iou(i);
        match best {
            Some((bi, bo)) if o > bo || (o == bo && i > bi) => {}
            _ => best = Some((i, o)),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoPositiveProposal(img.id))
}

/// `psi(m) - psi(n)` for two proposals of one image.
pub fn diff_feature(img: &ImageSample, m: usize, n: usize) -> Result<Vec<f64>> {
    Ok(linalg::sub(img.feature(m)?, img.feature(n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts unit cells covered by integer-coordinate boxes.
    fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut uni) = (0u32, 0u32);
        for x in -5..60 {
            for y in -5..60 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                uni += (ia || ib) as u32;
            }
        }
        inter as f64 / uni as f64
    }

    fn image(boxes: &[[f64; 4]], gt: &[[f64; 4]], label: Label) -> ImageSample {
        let mut proposals = vec![Proposal {
            bbox: bx(0.0, 0.0, 100.0, 100.0),
            feature: vec![0.0, 0.0],
        }];
        for (k, b) in boxes.iter().enumerate() {
            proposals.push(Proposal {
                bbox: BoundingBox::try_from(*b).unwrap(),
                feature: vec![k as f64, 1.0],
            });
        }
        ImageSample {
            id: ImageId(1),
            label,
            width: 100.0,
            height: 100.0,
            proposals,
            gt_boxes: gt.iter().map(|g| BoundingBox::try_from(*g).unwrap()).collect(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let expected = raster_iou([0, 0, 10, 10], [5, 0, 15, 10]);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - expected).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(matches!(
            BoundingBox::new(0.0, 0.0, 0.0, 5.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 5.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[3, 3, 1, 4]").is_err());
    }

    #[test]
    fn positive_set_threshold_rule() {
        // gt (0,0,10,10); proposals at IoU 1, 0.6, 0.4
        let img = image(
            &[[0., 0., 10., 10.], [0., 0., 10., 6.], [0., 0., 10., 4.]],
            &[[0., 0., 10., 10.]],
            Label::Positive,
        );
        assert!((img.best_iou(2) - 0.6).abs() < 1e-12);
        assert!((img.best_iou(3) - 0.4).abs() < 1e-12);
        assert_eq!(positive_set(&img, 0.5), vec![1, 2]);
    }

    #[test]
    fn negative_images_have_no_positives_and_use_full_image() {
        let img = image(&[[0., 0., 10., 10.]], &[], Label::Negative);
        assert!(positive_set(&img, 0.5).is_empty());
        assert_eq!(select_y_i(&img, &[]).unwrap(), ImageSample::FULL_IMAGE);
    }

    #[test]
    fn select_y_i_picks_minimum_overlap() {
        // IoUs 0.9 and 0.55 against gt (0,0,100,10) ...
        let img = image(
            &[[0., 0., 90., 10.], [0., 0., 55., 10.], [0., 0., 55., 10.]],
            &[[0., 0., 100., 10.]],
            Label::Positive,
        );
        let pos = positive_set(&img, 0.5);
        assert_eq!(pos, vec![1, 2, 3]);
        // tie between 2 and 3 goes to the lower index
        assert_eq!(select_y_i(&img, &pos).unwrap(), 2);
        assert_eq!(select_y_i(&img, &[1]).unwrap(), 1);
        assert!(matches!(select_y_i(&img, &[]), Err(Error::NoPositiveProposal(_))));
    }

    #[test]
    fn multi_annotation_uses_best_match() {
        let img = image(
            &[[50., 50., 60., 60.]],
            &[[0., 0., 10., 10.], [50., 50., 60., 60.]],
            Label::Positive,
        );
        assert_eq!(img.best_iou(1), 1.0);
        assert_eq!(positive_set(&img, 0.5), vec![1]);
    }

    #[test]
    fn diff_feature_examples() {
        let mut img = image(&[[0., 0., 1., 1.], [0., 0., 2., 2.]], &[], Label::Negative);
        img.proposals[1].feature = vec![1.0, 2.0];
        img.proposals[2].feature = vec![0.5, 1.0];
        assert_eq!(diff_feature(&img, 1, 2).unwrap(), vec![0.5, 1.0]);
        assert_eq!(diff_feature(&img, 1, 1).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            diff_feature(&img, 1, 9),
            Err(Error::IndexOutOfRange { index: 9, .. })
        ));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn diff_feature_antisymmetric(f in prop::collection::vec(-1e3..1e3f64, 6)) {
            let mut img = image(&[[0., 0., 1., 1.], [0., 0., 2., 2.]], &[], Label::Negative);
            img.proposals[1].feature = f[..2].to_vec();
            img.proposals[2].feature = f[2..4].to_vec();
            img.proposals[0].feature = f[4..].to_vec();
            for (m, n) in [(0, 1), (1, 2), (0, 2)] {
                let a = diff_feature(&img, m, n).unwrap();
                let b = diff_feature(&img, n, m).unwrap();
                prop_assert!(a.iter().zip(&b).all(|(x, y)| x + y == 0.0));
            }
        }

        #[test]
        fn positive_set_monotone_in_threshold(
            boxes in prop::collection::vec(arb_box(), 1..8),
            lo in 0.05..0.95f64,
            bump in 0.0..0.5f64,
        ) {
            let coords: Vec<[f64; 4]> = boxes.iter().map(|b| b.coords()).collect();
            let img = image(&coords, &[[10., 10., 30., 40.]], Label::Positive);
            let wide = positive_set(&img, lo);
            let narrow = positive_set(&img, lo + bump);
            prop_assert!(narrow.iter().all(|i| wide.contains(i)));
            if let Ok(y) = select_y_i(&img, &wide) {
                prop_assert!(wide.contains(&y));
            }
        }
    }
}
