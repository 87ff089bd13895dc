//! Boxes, overlap measures, and box-level segmentation targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Center-format box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validated constructor: center inside the unit square, extents in `(0, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&cx)
            && (0.0..=1.0).contains(&cy)
            && w > 0.0
            && w <= 1.0
            && h > 0.0
            && h <= 1.0;
        if ok {
            Ok(Self { cx, cy, w, h })
        } else {
            Err(Error::InvalidBox { cx, cy, w, h })
        }
    }

    /// No range checks; for geometry outside the unit square.
    pub const fn unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 <= x && x <= x1 && y0 <= y && y <= y1
    }

    /// Mirror about the vertical center line.
    pub fn flipped(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union.
pub fn box_giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (hull - union) / hull
}

pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-row GIoU between `[n, 4]` center-format boxes, recorded on the tape.
/// Returns shape `[n, 1]`.
pub fn giou_rows(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = tape.cols(b, 0, 1)?;
        let cy = tape.cols(b, 1, 2)?;
        let w = tape.cols(b, 2, 3)?;
        let h = tape.cols(b, 3, 4)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let [px0, py0, px1, py1] = corners(tape, pred)?;
    let [tx0, ty0, tx1, ty1] = corners(tape, target)?;
    let zero = tape.scalar(0.0);

    let ix1 = tape.minimum(px1, tx1)?;
    let ix0 = tape.maximum(px0, tx0)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.maximum(iw, zero)?;
    let iy1 = tape.minimum(py1, ty1)?;
    let iy0 = tape.maximum(py0, ty0)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px1, px0)?;
    let ph = tape.sub(py1, py0)?;
    let parea = tape.mul(pw, ph)?;
    let tw = tape.sub(tx1, tx0)?;
    let th = tape.sub(ty1, ty0)?;
    let tarea = tape.mul(tw, th)?;
    let sum = tape.add(parea, tarea)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let cx1 = tape.maximum(px1, tx1)?;
    let cx0 = tape.minimum(px0, tx0)?;
    let cw = tape.sub(cx1, cx0)?;
    let cy1 = tape.maximum(py1, ty1)?;
    let cy0 = tape.minimum(py0, ty0)?;
    let ch = tape.sub(cy1, cy0)?;
    let hull = tape.mul(cw, ch)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}

/// Per-row L1 distance between `[n, 4]` boxes, shape `[n]`.
pub fn l1_rows(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.sum_axis(a, 1)
}

/// `[n, 4]` tensor of box coordinates.
pub fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    let data = boxes.iter().flat_map(|b| b.to_array()).collect();
    Tensor::new(vec![boxes.len(), 4], data).expect("4 values per box")
}

/// Multi-hot cell labels over `classes` object channels plus one background
/// channel (the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegTarget {
    height: usize,
    width: usize,
    channels: usize,
    cells: Vec<bool>,
}

impl SegTarget {
    fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, cells: vec![false; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Object classes plus background.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn background(&self) -> usize {
        self.channels - 1
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> bool {
        self.cells[(row * self.width + col) * self.channels + channel]
    }

    fn set(&mut self, row: usize, col: usize, channel: usize, value: bool) {
        self.cells[(row * self.width + col) * self.channels + channel] = value;
    }

    fn fix_background(&mut self) {
        let bg = self.background();
        for r in 0..self.height {
            for c in 0..self.width {
                let any = (0..bg).any(|ch| self.get(r, c, ch));
                self.set(r, c, bg, !any);
            }
        }
    }

    /// `[height * width, channels]` of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.cells.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height * self.width, self.channels], data).expect("grid size")
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut out = Self::empty(self.height, self.width, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out.set(r, self.width - 1 - c, ch, self.get(r, c, ch));
                }
            }
        }
        out
    }
}

/// Labels every cell whose center lies inside a box with that box's class.
pub fn rasterize_boxes(boxes: &[BBox], labels: &[usize], height: usize, width: usize, classes: usize) -> Result<SegTarget> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut target = SegTarget::empty(height, width, classes + 1);
    for (b, &label) in boxes.iter().zip(labels) {
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            for c in 0..width {
                if b.contains_point((c as f64 + 0.5) / width as f64, y) {
                    target.set(r, c, label, true);
                }
            }
        }
    }
    target.fix_background();
    Ok(target)
}

/// Max-pools a target onto a coarser grid; background is recomputed from the
/// pooled object channels.
pub fn downsample_target(target: &SegTarget, height: usize, width: usize) -> Result<SegTarget> {
    if height > target.height || width > target.width || height == 0 || width == 0 {
        return Err(Error::Upsample { from: (target.height, target.width), to: (height, width) });
    }
    let mut out = SegTarget::empty(height, width, target.channels);
    let bg = target.background();
    for r in 0..height {
        let (r0, r1) = block(r, height, target.height);
        for c in 0..width {
            let (c0, c1) = block(c, width, target.width);
            for ch in 0..bg {
                let hit = (r0..r1).any(|fr| (c0..c1).any(|fc| target.get(fr, fc, ch)));
                out.set(r, c, ch, hit);
            }
        }
    }
    out.fix_background();
    Ok(out)
}

/// Fine-grid span `[start, end)` covered by coarse cell `i`.
fn block(i: usize, coarse: usize, fine: usize) -> (usize, usize) {
    let start = i * fine / coarse;
    let end = ((i + 1) * fine).div_ceil(coarse);
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_difference_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut impl Rng) -> BBox {
        let w = rng.gen_range(0.05..0.6);
        let h = rng.gen_range(0.05..0.6);
        BBox::new(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::unchecked(0.5, 0.5, 1.0, 1.0);
        let b = BBox::unchecked(1.0, 0.5, 1.0, 1.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = BBox::new(0.9, 0.9, 0.1, 0.1).unwrap();
        let near = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        assert_eq!(box_iou(&far, &near), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::unchecked(0.5, 0.5, 1.0, 1.0);
        assert_eq!(box_giou(&a, &a), 1.0);
        let far = BBox::unchecked(2.5, 0.5, 1.0, 1.0);
        assert!((box_giou(&a, &far) + 1.0 / 3.0).abs() < 1e-12);
        // the hull of two side-by-side unit boxes is exactly their union
        let b = BBox::unchecked(1.0, 0.5, 1.0, 1.0);
        assert!((box_giou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(box_l1(&a, &a), 0.0);
        let shifted = BBox::new(0.6, 0.5, 0.2, 0.2).unwrap();
        assert!((box_l1(&a, &shifted) - 0.1).abs() < 1e-12);
        let b = BBox::new(0.4, 0.6, 0.1, 0.3).unwrap();
        assert!((box_l1(&a, &b) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.2).is_err());
        assert!(BBox::new(0.5, 0.5, 0.2, -0.1).is_err());
        assert!(BBox::new(1.2, 0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn overlap_properties_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, b) = (random_box(&mut rng), random_box(&mut rng));
            let iou = box_iou(&a, &b);
            assert_eq!(iou, box_iou(&b, &a));
            assert!((0.0..=1.0).contains(&iou));
            assert!(box_giou(&a, &b) <= iou + 1e-15);
        }
    }

    #[test]
    fn tape_giou_matches_scalar_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<BBox> = (0..4).map(|_| random_box(&mut rng)).collect();
        let targets: Vec<BBox> = (0..4).map(|_| random_box(&mut rng)).collect();
        let target_t = boxes_tensor(&targets);
        let eval = |p: &Tensor| {
            let mut tape = Tape::new();
            let pv = tape.constant(p.clone());
            let tv = tape.constant(target_t.clone());
            let g = giou_rows(&mut tape, pv, tv).unwrap();
            let l = l1_rows(&mut tape, pv, tv).unwrap();
            tape.sum(g).map(|s| tape.value(s).item()).unwrap() + tape.value(l).sum()
        };
        let mut tape = Tape::new();
        let pv = tape.leaf(boxes_tensor(&preds));
        let tv = tape.constant(target_t.clone());
        let g = giou_rows(&mut tape, pv, tv).unwrap();
        for (i, (p, t)) in preds.iter().zip(&targets).enumerate() {
            assert!((tape.value(g).data()[i] - box_giou(p, t)).abs() < 1e-12);
        }
        let l = l1_rows(&mut tape, pv, tv).unwrap();
        let gs = tape.sum(g).unwrap();
        let ls = tape.sum(l).unwrap();
        let loss = tape.add(gs, ls).unwrap();
        let grads = tape.backward(loss).unwrap();
        let numeric = finite_difference_grad(eval, &boxes_tensor(&preds), 1e-6);
        let err = crate::numeric::relative_error(grads.get(pv).unwrap(), &numeric, 1e-8);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rasterize_examples() {
        let full = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let t = rasterize_boxes(&[full], &[3], 4, 4, 5).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!(t.get(r, c, 3));
                assert!(!t.get(r, c, 5));
            }
        }
        let empty = rasterize_boxes(&[], &[], 3, 3, 5).unwrap();
        assert!((0..3).all(|r| (0..3).all(|c| empty.get(r, c, 5))));
        assert!(matches!(
            rasterize_boxes(&[full], &[5], 4, 4, 5),
            Err(Error::LabelOutOfRange { label: 5, classes: 5 })
        ));
    }

    #[test]
    fn overlapping_boxes_are_multi_hot() {
        let a = BBox::from_corners(0.0, 0.0, 0.6, 0.6).unwrap();
        let b = BBox::from_corners(0.4, 0.4, 1.0, 1.0).unwrap();
        let t = rasterize_boxes(&[a, b], &[1, 2], 10, 10, 4).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                let (x, y) = ((c as f64 + 0.5) / 10.0, (r as f64 + 0.5) / 10.0);
                assert_eq!(t.get(r, c, 1), a.contains_point(x, y));
                assert_eq!(t.get(r, c, 2), b.contains_point(x, y));
                assert_eq!(t.get(r, c, 4), !(a.contains_point(x, y) || b.contains_point(x, y)));
            }
        }
        assert!(t.get(4, 4, 1) && t.get(4, 4, 2));
    }

    /// Brute-force oracle: direct point-in-rectangle test per cell.
    fn oracle_cell(boxes: &[BBox], labels: &[usize], r: usize, c: usize, h: usize, w: usize, ch: usize) -> bool {
        let (x, y) = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
        boxes.iter().zip(labels).any(|(b, &l)| {
            l == ch && b.cx - b.w / 2.0 <= x && x <= b.cx + b.w / 2.0 && b.cy - b.h / 2.0 <= y && y <= b.cy + b.h / 2.0
        })
    }

    #[test]
    fn rasterization_matches_point_in_box_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.gen_range(0..5);
            let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let t = rasterize_boxes(&boxes, &labels, 16, 16, 6).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    let mut any = false;
                    for ch in 0..6 {
                        let expect = oracle_cell(&boxes, &labels, r, c, 16, 16, ch);
                        any |= expect;
                        assert_eq!(t.get(r, c, ch), expect);
                    }
                    assert_eq!(t.get(r, c, 6), !any);
                }
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let empty = rasterize_boxes(&[], &[], 8, 8, 3).unwrap();
        let d = downsample_target(&empty, 2, 2).unwrap();
        assert!((0..2).all(|r| (0..2).all(|c| d.get(r, c, 3) && !d.get(r, c, 0))));

        // one positive fine cell at (1, 2)
        let cell = BBox::from_corners(0.5, 0.25, 0.75, 0.5).unwrap();
        let small = BBox::new(cell.cx, cell.cy, 0.01, 0.01).unwrap();
        let t = rasterize_boxes(&[small], &[0], 4, 4, 2).unwrap();
        let d = downsample_target(&t, 2, 2).unwrap();
        let positives: usize = (0..2).map(|r| (0..2).filter(|&c| d.get(r, c, 0)).count()).sum();
        assert_eq!(positives, 1);
        assert!(d.get(0, 1, 0));

        assert!(matches!(downsample_target(&t, 8, 8), Err(Error::Upsample { .. })));
    }

    #[test]
    fn downsample_matches_block_or_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(0..4);
            let boxes: Vec<BBox> = (0..n)
                .map(|_| {
                    let w = rng.gen_range(0.05..0.3);
                    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), w, w).unwrap()
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let fine = rasterize_boxes(&boxes, &labels, 8, 8, 3).unwrap();
            let coarse = downsample_target(&fine, 4, 4).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    for ch in 0..3 {
                        let expect = [0, 1].iter().any(|dr| [0, 1].iter().any(|dc| fine.get(2 * r + dr, 2 * c + dc, ch)));
                        assert_eq!(coarse.get(r, c, ch), expect);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn downsample_preserves_present_classes(
            cx in 0.1f64..0.9, cy in 0.1f64..0.9, w in 0.01f64..0.2, label in 0usize..4, size in 1usize..8
        ) {
            let b = BBox::new(cx, cy, w, w).unwrap();
            let fine = rasterize_boxes(&[b], &[label], 16, 16, 4).unwrap();
            let present = (0..16).any(|r| (0..16).any(|c| fine.get(r, c, label)));
            let coarse = downsample_target(&fine, size, size).unwrap();
            let kept = (0..size).any(|r| (0..size).any(|c| coarse.get(r, c, label)));
            prop_assert_eq!(present, kept);
        }
    }
}
