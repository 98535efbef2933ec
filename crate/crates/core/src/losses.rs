//! Detection losses: sigmoid focal classification, GIoU and L1 box terms, and
//! the regression losses available to the ranking head.
//!
//! The soft-gradient L1 loss has no closed-form value of its own; only its
//! gradient is prescribed. It is therefore a custom tape node whose reported
//! value is `|y* - y|` and whose backward injects the continuous gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BBox};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Guard on the denominators of the SGL1 ratios.
const RATIO_GUARD: f64 = 1e-8;

/// `sigmoid(1) - sigmoid(0)`, the largest SGL1 gradient magnitude.
pub fn sgl1_gradient_bound() -> f64 {
    sigmoid(1.0) - 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub rank: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            giou: 2.0,
            l1: 5.0,
            rank: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.giou, self.l1, self.rank];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Ranking label fed to the ranking head's loss. Never part of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTarget {
    y: f64,
}

impl RankingTarget {
    pub fn new(y: f64) -> Result<Self> {
        if !(y.is_finite() && y >= 1.0) {
            return Err(Error::Contract(format!("ranking target must be finite and >= 1, got {y}")));
        }
        Ok(RankingTarget { y })
    }

    pub fn value(self) -> f64 {
        self.y
    }
}

/// Gradient of plain L1 w.r.t. the prediction: the sign of `y_star - y`.
pub fn l1_gradient(y_star: f64, y: f64) -> f64 {
    let d = y_star - y;
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Continuous replacement for [`l1_gradient`]:
/// `sigmoid(1) - sigmoid(y / y*)` when `y* >= y`, else `sigmoid(y* / y) - sigmoid(1)`.
///
/// Exactly 0 when `y* == y`, including the `0 == 0` corner the ratios cannot reach.
pub fn sgl1_gradient(y_star: f64, y: f64) -> f64 {
    if y_star == y {
        0.0
    } else if y_star > y {
        sigmoid(1.0) - sigmoid(y / y_star.max(RATIO_GUARD))
    } else {
        sigmoid(y_star / y.max(RATIO_GUARD)) - sigmoid(1.0)
    }
}

/// Regression loss used on the ranking head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingLoss {
    #[default]
    Sgl1,
    L1,
    SmoothL1,
    L2,
}

impl RankingLoss {
    pub const ALL: [RankingLoss; 4] = [RankingLoss::L1, RankingLoss::L2, RankingLoss::SmoothL1, RankingLoss::Sgl1];

    pub fn name(self) -> &'static str {
        match self {
            RankingLoss::Sgl1 => "sgl1",
            RankingLoss::L1 => "l1",
            RankingLoss::SmoothL1 => "smooth_l1",
            RankingLoss::L2 => "l2",
        }
    }

    /// `(value, d value / d y*)` for a prediction and label.
    pub fn eval(self, y_star: f64, y: f64) -> (f64, f64) {
        let d = y_star - y;
        match self {
            RankingLoss::Sgl1 => (d.abs(), sgl1_gradient(y_star, y)),
            RankingLoss::L1 => (d.abs(), l1_gradient(y_star, y)),
            // beta = 1
            RankingLoss::SmoothL1 => {
                if d.abs() < 1.0 {
                    (0.5 * d * d, d)
                } else {
                    (d.abs() - 0.5, l1_gradient(y_star, y))
                }
            }
            RankingLoss::L2 => (d * d, 2.0 * d),
        }
    }
}

impl std::str::FromStr for RankingLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgl1" => Ok(RankingLoss::Sgl1),
            "l1" => Ok(RankingLoss::L1),
            "smooth_l1" | "smooth-l1" => Ok(RankingLoss::SmoothL1),
            "l2" => Ok(RankingLoss::L2),
            other => Err(Error::Config(format!("unknown ranking loss {other:?}"))),
        }
    }
}

fn scalar_input(tape: &Tape, y_star: Var) -> Result<f64> {
    if tape.value(y_star).len() != 1 {
        return Err(Error::dim("ranking prediction must be a scalar"));
    }
    Ok(tape.scalar(y_star))
}

/// Soft-gradient L1 node: value `|y* - y|`, backward [`sgl1_gradient`].
pub fn sgl1(tape: &mut Tape, y_star: Var, target: RankingTarget) -> Result<Var> {
    ranking_loss(tape, y_star, target, RankingLoss::Sgl1)
}

pub fn ranking_loss(tape: &mut Tape, y_star: Var, target: RankingTarget, kind: RankingLoss) -> Result<Var> {
    let pred = scalar_input(tape, y_star)?;
    if !(pred >= 0.0) {
        return Err(Error::Contract(format!("ranking prediction must be >= 0, got {pred}")));
    }
    let (value, grad) = kind.eval(pred, target.value());
    tape.custom(&[y_star], value, vec![vec![grad]])
}

/// Focal loss and its derivative w.r.t. the logit for one prediction.
pub fn focal_term(logit: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let g = FOCAL_GAMMA;
    if positive {
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let value = -FOCAL_ALPHA * q.powf(g) * log_p;
        let grad = FOCAL_ALPHA * (g * q.powf(g) * p * log_p - q.powf(g + 1.0));
        (value, grad)
    } else {
        let log_q = -softplus(logit);
        let value = -(1.0 - FOCAL_ALPHA) * p.powf(g) * log_q;
        let grad = (1.0 - FOCAL_ALPHA) * (p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * log_q);
        (value, grad)
    }
}

/// Sigmoid focal loss summed over predictions and divided by `max(#positives, 1)`.
pub fn classification_loss(tape: &mut Tape, logits: Var, positive: &[bool]) -> Result<Var> {
    let n = tape.value(logits).len();
    if n != positive.len() {
        return Err(Error::dim(format!("{n} logits but {} labels", positive.len())));
    }
    if n == 0 {
        return tape.constant(vec![1], vec![0.0]);
    }
    let norm = positive.iter().filter(|&&p| p).count().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &pos) in tape.value(logits).iter().zip(positive) {
        let (v, g) = focal_term(x, pos);
        value += v;
        grad.push(g / norm);
    }
    tape.custom(&[logits], value / norm, vec![grad])
}

/// `(mean(1 - GIoU), mean(mean |delta coord|))` over matched pairs.
///
/// `pred_boxes` is an `N x 4` node of `(cx, cy, w, h)`; `pairs` index into it
/// and into `gts`.
pub fn box_losses(tape: &mut Tape, pred_boxes: Var, gts: &[BBox], pairs: &[(usize, usize)]) -> Result<(Var, Var)> {
    let (n, c) = tape.dims2(pred_boxes)?;
    if c != 4 {
        return Err(Error::dim("box node must have 4 columns"));
    }
    if pairs.is_empty() {
        let z1 = tape.constant(vec![1], vec![0.0])?;
        let z2 = tape.constant(vec![1], vec![0.0])?;
        return Ok((z1, z2));
    }
    let k = pairs.len() as f64;
    let mut giou_val = 0.0;
    let mut l1_val = 0.0;
    let mut giou_grad = vec![0.0; n * 4];
    let mut l1_grad = vec![0.0; n * 4];
    {
        let vals = tape.value(pred_boxes);
        for &(p, g) in pairs {
            if p >= n || g >= gts.len() {
                return Err(Error::dim(format!("pair ({p}, {g}) out of range")));
            }
            let pb = BBox::from_array(&vals[p * 4..p * 4 + 4]);
            let gb = gts[g];
            let (v, dp, _) = giou_with_grad(pb, gb);
            giou_val += 1.0 - v;
            for j in 0..4 {
                giou_grad[p * 4 + j] -= dp[j] / k;
            }
            let (pa, ga) = (pb.to_array(), gb.to_array());
            for j in 0..4 {
                let d = pa[j] - ga[j];
                l1_val += d.abs() / 4.0;
                l1_grad[p * 4 + j] += l1_gradient(pa[j], ga[j]) / (4.0 * k);
            }
        }
    }
    let gl = tape.custom(&[pred_boxes], giou_val / k, vec![giou_grad])?;
    let ll = tape.custom(&[pred_boxes], l1_val / k, vec![l1_grad])?;
    Ok((gl, ll))
}

/// Loss terms for one set of predictions.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub rank: Option<Var>,
}

/// Weighted sum `cls*L_cls + giou*L_giou + l1*L_l1 + rank*L_rank`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(terms.cls, w.cls);
    let b = tape.scale(terms.giou, w.giou);
    let c = tape.scale(terms.l1, w.l1);
    let mut total = tape.add(a, b)?;
    total = tape.add(total, c)?;
    if let Some(r) = terms.rank {
        let d = tape.scale(r, w.rank);
        total = tape.add(total, d)?;
    }
    Ok(total)
}
