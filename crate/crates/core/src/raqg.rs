//! Query-count logic: ranking labels, the query supplementer and its removal
//! variant, and the fixed-count baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::Assignment;
use crate::model::rank_descending;

/// Coverage threshold used by [`guideline_audit`].
pub const COVERAGE_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// `k` trainable, image-independent queries.
    LearnableParameters { k: usize },
    /// The `k` highest-scoring encoder proposals.
    TwoStage { k: usize },
    /// Ranking-predicted count; `removal` trains the head on scaled labels
    /// and drops the supplementer at inference.
    Raqg { m: usize, removal: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub min_queries: usize,
    pub max_queries: usize,
}

impl QueryStrategy {
    pub fn raqg(m: usize, removal: bool, tokens: usize) -> Self {
        QueryStrategy {
            kind: StrategyKind::Raqg { m, removal },
            min_queries: 1,
            max_queries: tokens,
        }
    }

    pub fn two_stage(k: usize, tokens: usize) -> Self {
        QueryStrategy {
            kind: StrategyKind::TwoStage { k },
            min_queries: 1,
            max_queries: tokens,
        }
    }

    pub fn learnable(k: usize, tokens: usize) -> Self {
        QueryStrategy {
            kind: StrategyKind::LearnableParameters { k },
            min_queries: 1,
            max_queries: tokens,
        }
    }

    pub fn validate(&self, tokens: usize) -> Result<()> {
        if self.min_queries < 1 || self.min_queries > self.max_queries || self.max_queries > tokens {
            return Err(Error::Config(format!(
                "query bounds ({}, {}) must satisfy 1 <= min <= max <= {tokens}",
                self.min_queries, self.max_queries
            )));
        }
        match self.kind {
            StrategyKind::LearnableParameters { k: 0 } | StrategyKind::TwoStage { k: 0 } => {
                Err(Error::Config("fixed query count must be at least 1".into()))
            }
            StrategyKind::TwoStage { k } if k > tokens => Err(Error::Config(format!(
                "two-stage count {k} exceeds the {tokens} available proposals"
            ))),
            _ => Ok(()),
        }
    }

    /// Supplement multiplier, zero for the fixed strategies.
    pub fn m(&self) -> usize {
        match self.kind {
            StrategyKind::Raqg { m, .. } => m,
            _ => 0,
        }
    }

    pub fn is_raqg(&self) -> bool {
        matches!(self.kind, StrategyKind::Raqg { .. })
    }

    pub fn name(&self) -> String {
        match self.kind {
            StrategyKind::LearnableParameters { k } => format!("learnable_parameters({k})"),
            StrategyKind::TwoStage { k } => format!("two_stage({k})"),
            StrategyKind::Raqg { m, removal: true } => format!("raqg(M={m}, removal)"),
            StrategyKind::Raqg { m, removal: false } => format!("raqg(M={m})"),
        }
    }

    fn clamp(&self, x: usize) -> usize {
        x.clamp(self.min_queries, self.max_queries)
    }

    /// Target for the ranking head: the scaled label for the removal
    /// variant, the base rank otherwise.
    pub fn ranking_target(&self, label: &RankingLabel) -> f64 {
        match self.kind {
            StrategyKind::Raqg { removal: false, .. } => label.base_rank as f64,
            _ => label.scaled,
        }
    }

    /// Decoder query count during training. The count is teacher-forced from
    /// the label; images without positives get the lower bound.
    pub fn training_count(&self, label: Option<&RankingLabel>) -> Result<usize> {
        match self.kind {
            StrategyKind::Raqg { .. } => Ok(match label {
                Some(l) => self.clamp(round_half_up(l.scaled)),
                None => self.min_queries,
            }),
            _ => baseline_counts(self),
        }
    }

    /// Decoder query count at inference from the ranking head output.
    pub fn inference_count(&self, r_pred: f64) -> Result<usize> {
        match self.kind {
            StrategyKind::Raqg { removal: true, .. } => Ok(self.clamp(round_half_up(r_pred.max(0.0)))),
            StrategyKind::Raqg { m, removal: false } => Ok(supplement_count(r_pred, m, self.min_queries, self.max_queries)),
            _ => baseline_counts(self),
        }
    }
}

/// Round half up for non-negative values.
pub fn round_half_up(x: f64) -> usize {
    if x.is_nan() || x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as usize
    }
}

/// Rank of the lowest-scoring positive proposal and its supplemented scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingLabel {
    pub base_rank: usize,
    pub scaled: f64,
}

/// 1-based position, in stable descending score order, of the positive
/// proposal with the lowest score. `None` when there are no positives.
pub fn ranking_label(scores: &[f64], assignment: &Assignment, m: usize) -> Option<RankingLabel> {
    if assignment.num_positives() == 0 {
        return None;
    }
    let order = rank_descending(scores);
    let mut rank_of = vec![0usize; scores.len()];
    for (pos, &t) in order.iter().enumerate() {
        rank_of[t] = pos + 1;
    }
    let base_rank = assignment.positives().map(|p| rank_of[p]).max()?;
    Some(RankingLabel {
        base_rank,
        scaled: (1 + m) as f64 * base_rank as f64,
    })
}

/// `clamp(round((1 + M) R), min, max)`.
pub fn supplement_count(r: f64, m: usize, min: usize, max: usize) -> usize {
    round_half_up((1 + m) as f64 * r.max(0.0)).clamp(min, max)
}

/// Fixed query count of the baseline strategies.
pub fn baseline_counts(strategy: &QueryStrategy) -> Result<usize> {
    match strategy.kind {
        StrategyKind::LearnableParameters { k } | StrategyKind::TwoStage { k } => Ok(k),
        StrategyKind::Raqg { .. } => Err(Error::Usage("ranking-based strategy has no fixed count".into())),
    }
}

/// Query-set health statistics for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidelineReport {
    pub query_count: usize,
    pub gt_count: usize,
    /// At least as many queries as objects.
    pub enough_queries: bool,
    /// Largest IoU between two distinct query anchors (0 for fewer than two).
    pub max_anchor_iou: f64,
    /// Objects without an anchor of IoU above [`COVERAGE_IOU`].
    pub uncovered: usize,
    pub all_covered: bool,
    pub positives: usize,
    pub negatives: usize,
    /// `positives / negatives`; `None` when every query is positive.
    pub pos_neg_ratio: Option<f64>,
}

pub fn guideline_audit(anchors: &[BBox], gts: &[BBox], positives: usize) -> GuidelineReport {
    let mut max_anchor_iou: f64 = 0.0;
    for (i, a) in anchors.iter().enumerate() {
        for b in &anchors[i + 1..] {
            max_anchor_iou = max_anchor_iou.max(iou(*a, *b));
        }
    }
    let uncovered = gts
        .iter()
        .filter(|g| !anchors.iter().any(|a| iou(*a, **g) > COVERAGE_IOU))
        .count();
    let negatives = anchors.len().saturating_sub(positives);
    GuidelineReport {
        query_count: anchors.len(),
        gt_count: gts.len(),
        enough_queries: anchors.len() >= gts.len(),
        max_anchor_iou,
        uncovered,
        all_covered: uncovered == 0,
        positives,
        negatives,
        pos_neg_ratio: (negatives > 0).then(|| positives as f64 / negatives as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assignment(pos: &[usize], n: usize) -> Assignment {
        let pairs: Vec<(usize, usize)> = pos.iter().enumerate().map(|(g, &p)| (p, g)).collect();
        let mut pairs = pairs;
        pairs.sort_unstable();
        Assignment {
            unmatched: (0..n).filter(|i| !pos.contains(i)).collect(),
            pairs,
        }
    }

    #[test]
    fn lowest_positive_rank() {
        let l = ranking_label(&[0.3, 0.25, 0.18], &assignment(&[0, 2], 3), 5).unwrap();
        assert_eq!(l.base_rank, 3);
        assert_eq!(l.scaled, 18.0);
        let l = ranking_label(&[0.9], &assignment(&[0], 1), 0).unwrap();
        assert_eq!(l.base_rank, 1);
        assert!(ranking_label(&[0.5, 0.2], &assignment(&[], 2), 5).is_none());
    }

    #[test]
    fn ties_rank_lower_token_first() {
        let l = ranking_label(&[0.5, 0.5, 0.5], &assignment(&[1], 3), 0).unwrap();
        assert_eq!(l.base_rank, 2);
    }

    #[test]
    fn supplement_examples() {
        assert_eq!(supplement_count(3.0, 5, 1, 64), 18);
        assert_eq!(supplement_count(0.0, 5, 1, 64), 1);
        assert_eq!(supplement_count(2.5, 0, 1, 64), 3);
        assert_eq!(supplement_count(2.4, 0, 1, 64), 2);
        assert_eq!(supplement_count(100.0, 5, 1, 64), 64);
    }

    #[test]
    fn count_selection() {
        let removal = QueryStrategy::raqg(5, true, 64);
        let sup = QueryStrategy::raqg(5, false, 64);
        assert_eq!(removal.inference_count(17.6).unwrap(), 18);
        assert_eq!(sup.inference_count(3.0).unwrap(), 18);
        assert_eq!(removal.inference_count(0.0).unwrap(), 1);
        let label = RankingLabel { base_rank: 3, scaled: 18.0 };
        assert_eq!(removal.training_count(Some(&label)).unwrap(), 18);
        assert_eq!(sup.training_count(Some(&label)).unwrap(), 18);
        assert_eq!(removal.training_count(None).unwrap(), 1);
        let narrow = QueryStrategy { max_queries: 12, ..removal };
        assert_eq!(narrow.training_count(Some(&label)).unwrap(), 12);
        assert_eq!(removal.ranking_target(&label), 18.0);
        assert_eq!(sup.ranking_target(&label), 3.0);
    }

    #[test]
    fn baselines_are_fixed() {
        let s = QueryStrategy::two_stage(30, 64);
        assert_eq!(baseline_counts(&s).unwrap(), 30);
        assert_eq!(s.inference_count(55.0).unwrap(), 30);
        assert!(baseline_counts(&QueryStrategy::raqg(5, true, 64)).is_err());
        assert!(QueryStrategy::two_stage(300, 64).validate(64).is_err());
        assert!(QueryStrategy::learnable(0, 64).validate(64).is_err());
        let bad = QueryStrategy { min_queries: 5, max_queries: 4, ..s };
        assert!(bad.validate(64).is_err());
    }

    #[test]
    fn strategy_json_shape() {
        let s = QueryStrategy::raqg(5, true, 64);
        let v = serde_json::to_value(s).unwrap();
        assert_eq!(v["kind"], "raqg");
        assert_eq!(v["m"], 5);
        let back: QueryStrategy = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn audit_examples() {
        let gts = [BBox::new(0.2, 0.2, 0.1, 0.1), BBox::new(0.7, 0.7, 0.2, 0.2)];
        let r = guideline_audit(&gts, &gts, 2);
        assert!(r.enough_queries && r.all_covered);
        assert_eq!(r.max_anchor_iou, 0.0);
        assert_eq!(r.pos_neg_ratio, None);

        let same = [gts[0]; 3];
        let r = guideline_audit(&same, &gts, 1);
        assert_eq!(r.max_anchor_iou, 1.0);
        assert_eq!(r.uncovered, 1);
        assert_eq!(r.pos_neg_ratio, Some(0.5));
    }

    proptest! {
        #[test]
        fn label_is_rank_based(
            scores in prop::collection::vec(0.0f64..1.0, 1..40),
            pick in prop::collection::vec(any::<prop::sample::Index>(), 1..8),
            m in 0usize..9,
        ) {
            let n = scores.len();
            let mut pos: Vec<usize> = pick.iter().map(|i| i.index(n)).collect();
            pos.sort_unstable();
            pos.dedup();
            let a = assignment(&pos, n);
            let l = ranking_label(&scores, &a, m).unwrap();
            prop_assert!(l.base_rank >= pos.len() && l.base_rank <= n);
            prop_assert_eq!(l.scaled, ((1 + m) * l.base_rank) as f64);
            // Strictly monotone rescaling keeps the label.
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(ranking_label(&warped, &a, m).unwrap(), l);
            // Guideline 1 holds under teacher forcing.
            let s = QueryStrategy::raqg(m, true, n);
            prop_assert!(s.training_count(Some(&l)).unwrap() >= pos.len());
        }

        #[test]
        fn supplement_monotone(r in 0.0f64..20.0, dr in 0.0f64..5.0, m in 0usize..8) {
            prop_assert!(supplement_count(r, m, 1, 64) <= supplement_count(r + dr, m, 1, 64));
            prop_assert!(supplement_count(r, m, 1, 64) <= supplement_count(r, m + 1, 1, 64));
        }

        #[test]
        fn removal_matches_supplementer(base in 1usize..12, m in 0usize..9) {
            let removal = QueryStrategy::raqg(m, true, 64);
            let sup = QueryStrategy::raqg(m, false, 64);
            let scaled = ((1 + m) * base) as f64;
            prop_assert_eq!(removal.inference_count(scaled).unwrap(), sup.inference_count(base as f64).unwrap());
        }
    }
}
