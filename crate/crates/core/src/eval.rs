//! Detection metrics: recall, average precision and log-average miss rate
//! over false positives per image, with greedy IoU matching.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, BBox};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Floor applied to miss rates before taking logs.
pub const MISS_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Sorts detections by score, highest first, keeping input order on ties.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// True-positive flag per detection. Detections must already be in score
/// order; each claims the unclaimed ground truth of highest IoU at or above
/// `threshold` (ties go to the lower index).
pub fn match_detections(dets: &[Detection], gts: &[BBox], threshold: f64) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if claimed[g] {
                    continue;
                }
                let v = iou(d.bbox, *gt);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    claimed[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// `TP / n_gt`, defined as 1 for images without ground truth.
pub fn recall(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 1.0;
    }
    flags.iter().filter(|&&f| f).count() as f64 / n_gt as f64
}

/// Precision-recall points after each detection, in the given order.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (r, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the precision envelope (all-point interpolation).
/// With no ground truth: 1 when there are no detections, else 0.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(flags, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (&(r, _), p) in curve.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// The nine log-spaced FPPI reference points in `[1e-2, 1]`.
pub fn fppi_references() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 8.0))
}

/// Per-image matched detections, already score-sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub n_gt: usize,
}

impl ImageResult {
    pub fn new(mut dets: Vec<Detection>, gts: &[BBox]) -> Self {
        sort_by_score(&mut dets);
        let flags = match_detections(&dets, gts, IOU_THRESHOLD);
        ImageResult {
            scores: dets.iter().map(|d| d.score).collect(),
            flags,
            n_gt: gts.len(),
        }
    }
}

/// All detections of all images ordered by score (stable in image order).
fn pooled(images: &[ImageResult]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|im| im.scores.iter().copied().zip(im.flags.iter().copied()))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// `(fppi, miss_rate)` at every distinct score threshold, loosest last.
pub fn fppi_curve(images: &[ImageResult]) -> Vec<(f64, f64)> {
    let n_images = images.len().max(1) as f64;
    let n_gt: usize = images.iter().map(|im| im.n_gt).sum();
    let all = pooled(images);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (i, &(score, flag)) in all.iter().enumerate() {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = all.get(i + 1).is_none_or(|next| next.0 != score);
        if last_of_tie {
            let miss = if n_gt == 0 { 0.0 } else { 1.0 - tp as f64 / n_gt as f64 };
            curve.push((fp as f64 / n_images, miss));
        }
    }
    curve
}

/// Geometric mean of the miss rate sampled at the nine FPPI references.
pub fn log_average_miss_rate(images: &[ImageResult]) -> f64 {
    let curve = fppi_curve(images);
    let worst = curve.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    let worst = if curve.is_empty() { 1.0 } else { worst };
    let refs = fppi_references();
    let mean_log = refs
        .iter()
        .map(|&r| {
            let miss = curve
                .iter()
                .rev()
                .find(|&&(f, _)| f <= r)
                .map_or(worst, |&(_, m)| m);
            miss.max(MISS_FLOOR).ln()
        })
        .sum::<f64>()
        / refs.len() as f64;
    mean_log.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mr: f64,
    pub ap: f64,
    pub recall: f64,
    pub fppi_curve: Vec<(f64, f64)>,
    pub pr_curve: Vec<(f64, f64)>,
}

pub fn evaluate(images: &[ImageResult]) -> EvalResult {
    let n_gt: usize = images.iter().map(|im| im.n_gt).sum();
    let flags: Vec<bool> = pooled(images).into_iter().map(|(_, f)| f).collect();
    EvalResult {
        mr: log_average_miss_rate(images),
        ap: average_precision(&flags, n_gt),
        recall: recall(&flags, n_gt),
        fppi_curve: fppi_curve(images),
        pr_curve: pr_curve(&flags, n_gt),
    }
}

impl EvalResult {
    /// Writes `fppi.csv` and `pr.csv` into `dir`.
    pub fn write_curves(&self, dir: &Path) -> Result<()> {
        let mut fppi = String::from("fppi,miss_rate\n");
        for (f, m) in &self.fppi_curve {
            let _ = writeln!(fppi, "{f},{m}");
        }
        let mut pr = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            let _ = writeln!(pr, "{r},{p}");
        }
        fs::write(dir.join("fppi.csv"), fppi)?;
        fs::write(dir.join("pr.csv"), pr)?;
        Ok(())
    }
}

/// Ranks with ties replaced by their average (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn duplicates_and_empty() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(match_detections(&[det(g, 0.9), det(g, 0.8)], &[g], 0.5), vec![true, false]);
        assert!(match_detections(&[], &[g], 0.5).is_empty());
    }

    #[test]
    fn claims_highest_iou() {
        let g1 = BBox::new(0.3, 0.5, 0.2, 0.2);
        let g2 = BBox::new(0.36, 0.5, 0.2, 0.2);
        let d = BBox::new(0.35, 0.5, 0.2, 0.2);
        assert_eq!(match_detections(&[det(d, 1.0), det(g1, 0.5)], &[g1, g2], 0.5), vec![true, true]);
    }

    #[test]
    fn recall_values() {
        assert_eq!(recall(&[true, true, true, false], 4), 0.75);
        assert_eq!(recall(&[], 3), 0.0);
        assert_eq!(recall(&[], 0), 1.0);
    }

    #[test]
    fn ap_values() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        // Recall steps 0.5 at precision 1 and 0.5 at envelope 2/3.
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
    }

    #[test]
    fn miss_rate_extremes() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        let perfect = ImageResult::new(vec![det(g, 0.9)], &[g]);
        assert!(log_average_miss_rate(&[perfect]) <= 1e-9);
        let empty = ImageResult::new(vec![], &[g]);
        assert_eq!(log_average_miss_rate(&[empty]), 1.0);
    }

    #[test]
    fn references() {
        let r = fppi_references();
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15);
        assert!((r[4] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }

    fn arb_images() -> impl Strategy<Value = Vec<ImageResult>> {
        prop::collection::vec(
            (prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..8), 0usize..5),
            1..5,
        )
        .prop_map(|ims| {
            ims.into_iter()
                .map(|(mut d, n_gt)| {
                    d.sort_by(|a, b| b.0.total_cmp(&a.0));
                    // No more true positives than objects.
                    let mut tp = 0;
                    for x in d.iter_mut() {
                        if x.1 {
                            tp += 1;
                            x.1 = tp <= n_gt;
                        }
                    }
                    ImageResult {
                        scores: d.iter().map(|x| x.0).collect(),
                        flags: d.iter().map(|x| x.1).collect(),
                        n_gt,
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_rank_based(images in arb_images()) {
            let r = evaluate(&images);
            for v in [r.mr, r.ap, r.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let warped: Vec<ImageResult> = images
                .iter()
                .map(|im| ImageResult { scores: im.scores.iter().map(|s| 2.0 * s.powi(3) + 1.0).collect(), ..im.clone() })
                .collect();
            let w = evaluate(&warped);
            prop_assert_eq!((w.mr, w.ap, w.recall), (r.mr, r.ap, r.recall));
        }

        #[test]
        fn dropping_false_positive_helps(images in arb_images(), pick in any::<prop::sample::Index>()) {
            let fps: Vec<(usize, usize)> = images
                .iter()
                .enumerate()
                .flat_map(|(i, im)| im.flags.iter().enumerate().filter(|(_, f)| !**f).map(move |(j, _)| (i, j)))
                .collect();
            prop_assume!(!fps.is_empty() && images.iter().any(|im| im.n_gt > 0));
            let (i, j) = fps[pick.index(fps.len())];
            let mut fewer = images.clone();
            fewer[i].scores.remove(j);
            fewer[i].flags.remove(j);
            let (a, b) = (evaluate(&images), evaluate(&fewer));
            prop_assert!(b.ap >= a.ap - 1e-12);
            prop_assert!(b.mr <= a.mr + 1e-12);
        }
    }
}
