//! Training loop, held-out evaluation and ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    adamw_step, clip_grad_norm, ensure_grads, load_checkpoint, read_manifest, save_checkpoint, sgd_step, AdamState, OptimizerConfig, OptimizerKind,
    ParamId, Tape, Tensor, Var,
};
use crate::data::{render_scene, split, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, spearman, Detection, EvalResult, ImageResult};
use crate::geometry::BBox;
use crate::losses::{
    box_losses, classification_loss, ranking_loss, total_loss, LossTerms, LossWeights, RankingLoss, RankingTarget,
};
use crate::matching::{detr_cost, hungarian, Assignment, CostWeights};
use crate::model::{read_detections, Detector, ModelConfig};
use crate::raqg::{guideline_audit, ranking_label, GuidelineReport, QueryStrategy, StrategyKind};
use crate::rng::{stream, Stream};

/// Totals above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(flatten)]
    pub optimizer: OptimizerConfig,
    pub strategy: QueryStrategy,
    pub ranking_loss: RankingLoss,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub cost_weights: CostWeights,
    /// Global-norm clip for every parameter outside the ranking head.
    pub clip_norm: Option<f64>,
    /// Switch from label-derived to predicted query counts from this epoch on.
    pub predicted_count_after: Option<usize>,
    /// Evaluate on the held-out split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Random horizontal and vertical flips of each training scene.
    pub augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            epochs: 60,
            optimizer: OptimizerConfig::default(),
            strategy: QueryStrategy::raqg(5, true, model.tokens()),
            ranking_loss: RankingLoss::Sgl1,
            seed: 0,
            loss_weights: LossWeights::default(),
            cost_weights: CostWeights::default(),
            clip_norm: Some(1.0),
            predicted_count_after: None,
            eval_every: 1,
            augment: true,
            model,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        self.model.validate()?;
        self.strategy.validate(self.model.tokens())?;
        if let StrategyKind::LearnableParameters { k } = self.strategy.kind {
            if self.model.lp_queries != Some(k) {
                return Err(Error::Config(format!(
                    "learnable_parameters({k}) needs model.lp_queries = {k}, found {:?}",
                    self.model.lp_queries
                )));
            }
        }
        Ok(())
    }

    /// Sets the strategy and keeps the model's free query slots consistent with it.
    pub fn with_strategy(mut self, strategy: QueryStrategy) -> Self {
        self.model.lp_queries = match strategy.kind {
            StrategyKind::LearnableParameters { k } => Some(k),
            _ => None,
        };
        self.strategy = strategy;
        self
    }

    /// Short hex digest of the configuration without its seed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("{}-seed{}", self.hash(), self.seed))
    }
}

/// Loss components of one training step (encoder and decoder terms summed).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    /// Ranking loss value; absent when the step had no ranking target.
    pub rank: Option<f64>,
    pub total: f64,
    pub query_count: usize,
    pub gt_count: usize,
    pub base_rank: Option<usize>,
    pub rank_prediction: f64,
}

fn match_predictions(dets: &[Detection], gts: &[BBox], w: CostWeights) -> Result<Assignment> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    hungarian(&detr_cost(&scores, &boxes, gts, w)?)
}

fn positive_flags(a: &Assignment, n: usize) -> Vec<bool> {
    let mut flags = vec![false; n];
    for p in a.positives() {
        flags[p] = true;
    }
    flags
}

/// Builds the full training graph for one image: encoder proposals and
/// their matching, ranking label and ranking loss, query selection, decoder
/// matching and the weighted decoder plus encoder-auxiliary losses.
pub fn forward_loss(
    model: &Detector,
    config: &TrainConfig,
    scene: &Scene,
    image: &Tensor,
    predicted_count: bool,
) -> Result<(Tape, Var, StepLosses)> {
    let mut tape = Tape::new();
    let gts = &scene.boxes;
    let strategy = &config.strategy;
    let x_bac = model.backbone_forward(&mut tape, image)?;
    let enc = model.encoder_forward(&mut tape, x_bac, model.grid())?;
    let enc_dets = read_detections(&tape, enc.logits, enc.boxes);
    let enc_assign = match_predictions(&enc_dets, gts, config.cost_weights)?;
    let proposals = model.proposals(&tape, &enc);

    let label = if strategy.is_raqg() {
        ranking_label(&proposals.scores, &enc_assign, strategy.m())
    } else {
        None
    };
    let mut rank_term = None;
    let mut rank_prediction = 0.0;
    if strategy.is_raqg() {
        let r = model.ranking_head_forward(&mut tape, enc.x_enc)?;
        rank_prediction = tape.scalar(r);
        if let Some(l) = &label {
            let target = RankingTarget::new(strategy.ranking_target(l))?;
            rank_term = Some(ranking_loss(&mut tape, r, target, config.ranking_loss)?);
        }
    }

    let queries = match strategy.kind {
        StrategyKind::LearnableParameters { .. } => model.learned_queries(&mut tape)?,
        _ => {
            let x = if predicted_count && strategy.is_raqg() {
                strategy.inference_count(rank_prediction)?
            } else {
                strategy.training_count(label.as_ref())?
            };
            model.query_generate(&mut tape, &proposals, x)?
        }
    };
    if strategy.is_raqg() && !predicted_count && enc_assign.num_positives() == gts.len() {
        debug_assert!(
            guideline_audit(&queries.anchors, gts, 0).enough_queries,
            "teacher-forced count {} below {} objects",
            queries.count(),
            gts.len()
        );
    }

    let x_dec = model.decoder_forward(&mut tape, enc.x_enc, &queries)?;
    let heads = model.detection_heads(&mut tape, x_dec, &queries)?;
    let dec_dets = read_detections(&tape, heads.logits, heads.boxes);
    let dec_assign = match_predictions(&dec_dets, gts, config.cost_weights)?;

    let w = &config.loss_weights;
    let dec_cls = classification_loss(&mut tape, heads.logits, &positive_flags(&dec_assign, dec_dets.len()))?;
    let (dec_giou, dec_l1) = box_losses(&mut tape, heads.boxes, gts, &dec_assign.pairs)?;
    let enc_cls = classification_loss(&mut tape, enc.logits, &positive_flags(&enc_assign, enc_dets.len()))?;
    let (enc_giou, enc_l1) = box_losses(&mut tape, enc.boxes, gts, &enc_assign.pairs)?;
    let dec_terms = LossTerms {
        cls: dec_cls,
        giou: dec_giou,
        l1: dec_l1,
        rank: rank_term,
    };
    let enc_terms = LossTerms {
        cls: enc_cls,
        giou: enc_giou,
        l1: enc_l1,
        rank: None,
    };
    let dec_total = total_loss(&mut tape, &dec_terms, w)?;
    let enc_total = total_loss(&mut tape, &enc_terms, w)?;
    let total = tape.add(dec_total, enc_total)?;

    let losses = StepLosses {
        cls: tape.scalar(dec_cls) + tape.scalar(enc_cls),
        giou: tape.scalar(dec_giou) + tape.scalar(enc_giou),
        l1: tape.scalar(dec_l1) + tape.scalar(enc_l1),
        rank: rank_term.map(|r| tape.scalar(r)),
        total: tape.scalar(total),
        query_count: queries.count(),
        gt_count: gts.len(),
        base_rank: label.map(|l| l.base_rank),
        rank_prediction,
    };
    Ok((tape, total, losses))
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Detector,
    pub config: TrainConfig,
    adam: AdamState,
    clipped: Vec<ParamId>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Detector::new(config.model.clone(), config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Detector, config: TrainConfig) -> Self {
        let ranking = model.ranking_params();
        let clipped = model.store.ids().filter(|id| !ranking.contains(id)).collect();
        Trainer {
            model,
            config,
            adam: AdamState::default(),
            clipped,
        }
    }

    /// One forward/backward/update on a single image.
    pub fn step(&mut self, scene: &Scene, image: &Tensor, epoch: usize, iter: usize) -> Result<StepLosses> {
        let predicted = self.config.predicted_count_after.is_some_and(|e| epoch >= e);
        let (mut tape, total, losses) = forward_loss(&self.model, &self.config, scene, image, predicted)?;
        let bad = |v: f64| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT;
        if bad(losses.total) || bad(losses.rank_prediction) {
            return Err(Error::Diverged(format!(
                "epoch {epoch} iter {iter} scene {}: cls {} giou {} l1 {} rank {:?} total {} prediction {}",
                scene.id, losses.cls, losses.giou, losses.l1, losses.rank, losses.total, losses.rank_prediction
            )));
        }
        tape.backward(total)?;
        let store = &mut self.model.store;
        store.zero_grads();
        tape.write_param_grads(store);
        ensure_grads(store);
        if let Some(max) = self.config.clip_norm {
            clip_grad_norm(store, &self.clipped, max);
        }
        match self.config.optimizer.kind {
            OptimizerKind::Sgd => sgd_step(store, &self.config.optimizer, epoch)?,
            OptimizerKind::AdamW => adamw_step(store, &mut self.adam, &self.config.optimizer, epoch)?,
        }
        Ok(losses)
    }
}

/// Per-image inference record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub gt_count: usize,
    pub query_count: usize,
    pub rank_prediction: f64,
    pub audit: GuidelineReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub metrics: EvalResult,
    pub mean_query_count: f64,
    pub query_count_std: f64,
    /// Spearman correlation between query count and object count.
    pub count_correlation: f64,
    pub images: Vec<ImageRecord>,
}

impl DetectorEval {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            mr: self.metrics.mr,
            ap: self.metrics.ap,
            recall: self.metrics.recall,
            mean_query_count: self.mean_query_count,
            query_count_std: self.query_count_std,
            count_correlation: self.count_correlation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mr: f64,
    pub ap: f64,
    pub recall: f64,
    pub mean_query_count: f64,
    pub query_count_std: f64,
    pub count_correlation: f64,
}

pub fn evaluate_detector(model: &Detector, scenes: &[Scene], strategy: &QueryStrategy) -> Result<DetectorEval> {
    let size = model.config().image_size;
    let mut results = Vec::with_capacity(scenes.len());
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let inf = model.infer(&render_scene(scene, size), strategy)?;
        let result = ImageResult::new(inf.detections, &scene.boxes);
        let tp = result.flags.iter().filter(|&&f| f).count();
        images.push(ImageRecord {
            id: scene.id,
            gt_count: scene.boxes.len(),
            query_count: inf.query_count,
            rank_prediction: inf.rank_prediction,
            audit: guideline_audit(&inf.anchors, &scene.boxes, tp),
        });
        results.push(result);
    }
    let counts: Vec<f64> = images.iter().map(|r| r.query_count as f64).collect();
    let gts: Vec<f64> = images.iter().map(|r| r.gt_count as f64).collect();
    let n = counts.len().max(1) as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(DetectorEval {
        metrics: evaluate(&results),
        mean_query_count: mean,
        query_count_std: var.sqrt(),
        count_correlation: if counts.len() > 1 { spearman(&counts, &gts) } else { 0.0 },
        images,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean: StepLosses,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
    pub final_eval: Option<DetectorEval>,
    pub run_dir: Option<PathBuf>,
}

impl TrainReport {
    pub fn model(&self) -> &Detector {
        &self.trainer.model
    }

    /// Mean total loss of an epoch (0-based).
    pub fn epoch_loss(&self, epoch: usize) -> f64 {
        self.epochs[epoch].mean.total
    }
}

fn mean_losses(steps: &[StepLosses]) -> StepLosses {
    let n = steps.len().max(1) as f64;
    let ranked: Vec<f64> = steps.iter().filter_map(|s| s.rank).collect();
    StepLosses {
        cls: steps.iter().map(|s| s.cls).sum::<f64>() / n,
        giou: steps.iter().map(|s| s.giou).sum::<f64>() / n,
        l1: steps.iter().map(|s| s.l1).sum::<f64>() / n,
        rank: (!ranked.is_empty()).then(|| ranked.iter().sum::<f64>() / ranked.len() as f64),
        total: steps.iter().map(|s| s.total).sum::<f64>() / n,
        query_count: (steps.iter().map(|s| s.query_count).sum::<usize>() as f64 / n).round() as usize,
        gt_count: (steps.iter().map(|s| s.gt_count).sum::<usize>() as f64 / n).round() as usize,
        base_rank: None,
        rank_prediction: steps.iter().map(|s| s.rank_prediction).sum::<f64>() / n,
    }
}

/// Trains on the first 80% of `dataset` (by id) and evaluates on the rest.
/// With `out`, writes `losses.csv`, `eval.json` and the checkpoint into the
/// run directory.
pub fn train(config: &TrainConfig, dataset: &[Scene], out: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let (train_set, held_out) = split(dataset);
    let size = config.model.image_size;
    let images: Vec<Tensor> = train_set.iter().map(|s| render_scene(s, size)).collect();
    let mut trainer = Trainer::new(config.clone())?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut flips = stream(config.seed, Stream::Augment);

    let run_dir = match out {
        Some(o) => {
            let d = config.run_dir(o);
            fs::create_dir_all(&d)?;
            fs::write(d.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
            Some(d)
        }
        None => None,
    };
    let mut csv = match &run_dir {
        Some(d) => {
            let mut w = BufWriter::new(fs::File::create(d.join("losses.csv"))?);
            writeln!(w, "epoch,iter,cls,giou,l1,sgl1,total")?;
            Some(w)
        }
        None => None,
    };

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut final_eval = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut steps = Vec::with_capacity(order.len());
        for (iter, &i) in order.iter().enumerate() {
            let (h, v) = if config.augment { (flips.gen_bool(0.5), flips.gen_bool(0.5)) } else { (false, false) };
            let s = if h || v {
                let scene = train_set[i].flipped(h, v);
                trainer.step(&scene, &render_scene(&scene, size), epoch, iter)?
            } else {
                trainer.step(&train_set[i], &images[i], epoch, iter)?
            };
            if let Some(w) = csv.as_mut() {
                let rank = s.rank.map_or(String::new(), |r| r.to_string());
                writeln!(w, "{},{},{},{},{},{},{}", epoch + 1, iter, s.cls, s.giou, s.l1, rank, s.total)?;
            }
            steps.push(s);
        }
        let mean = mean_losses(&steps);
        let last = epoch + 1 == config.epochs;
        let eval = if !held_out.is_empty() && ((epoch + 1) % config.eval_every == 0 || last) {
            let e = evaluate_detector(&trainer.model, &held_out, &config.strategy)?;
            let summary = e.summary();
            if last {
                final_eval = Some(e);
            }
            Some(summary)
        } else {
            None
        };
        info!(
            "epoch {}: loss {:.4} queries {:.1}{}",
            epoch + 1,
            mean.total,
            steps.iter().map(|s| s.query_count as f64).sum::<f64>() / steps.len() as f64,
            eval.map_or(String::new(), |e| format!(" | AP {:.3} recall {:.3} MR {:.3}", e.ap, e.recall, e.mr))
        );
        epochs.push(EpochLog {
            epoch: epoch + 1,
            lr: config.optimizer.effective_lr(epoch),
            mean,
            eval,
        });
    }

    if let Some(d) = &run_dir {
        if let Some(mut w) = csv.take() {
            w.flush()?;
        }
        fs::write(d.join("eval.json"), serde_json::to_string_pretty(&epochs)? + "\n")?;
        if let Some(e) = &final_eval {
            e.metrics.write_curves(d)?;
        }
        let meta = serde_json::json!({ "train_config": config });
        save_checkpoint(&trainer.model.store, d, "checkpoint", meta)?;
    }
    Ok(TrainReport {
        trainer,
        epochs,
        final_eval,
        run_dir,
    })
}

/// Rebuilds the detector saved by [`train`] from its checkpoint manifest.
pub fn load_run(manifest: &Path) -> Result<(Detector, TrainConfig)> {
    let m = read_manifest(manifest)?;
    let config: TrainConfig = match m.meta.get("train_config") {
        Some(c) => serde_json::from_value(c.clone())?,
        None => return Err(Error::Checkpoint(format!("{} has no train_config metadata", manifest.display()))),
    };
    let mut model = Detector::new(config.model.clone(), config.seed)?;
    load_checkpoint(&mut model.store, manifest)?;
    Ok((model, config))
}

/// Which knob an ablation grid varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Supplement multiplier columns; `true` marks the removal variant.
    Multiplier(Vec<(usize, bool)>),
    RankingLoss(Vec<RankingLoss>),
    Strategy(Vec<QueryStrategy>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellOutcome {
    Done(EvalSummary),
    Diverged { detail: String },
    Failed { detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub outcome: CellOutcome,
    /// Full held-out evaluation, including per-image query audits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<DetectorEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

impl AblationReport {
    /// `label,queries,mr,ap,recall` with raw fractions; failed or diverged
    /// cells leave the metric fields empty. Labels are always quoted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,queries,mr,ap,recall\n");
        for c in &self.cells {
            let label = format!("\"{}\"", c.label.replace('"', "\"\""));
            match &c.outcome {
                CellOutcome::Done(s) => {
                    let _ = writeln!(out, "{label},{},{},{},{}", s.mean_query_count, s.mr, s.ap, s.recall);
                }
                _ => {
                    let _ = writeln!(out, "{label},,,,");
                }
            }
        }
        out
    }

    /// Plain-text table. Multiplier and loss grids put cells in columns with
    /// MR/AP/Recall rows; strategy grids put one strategy per row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self.axis {
            AblationAxis::Strategy(_) => {
                let _ = writeln!(out, "| strategy | queries | MR | AP | Recall |");
                let _ = writeln!(out, "|---|---|---|---|---|");
                for c in &self.cells {
                    let row = match &c.outcome {
                        CellOutcome::Done(s) => {
                            format!("{:.1} | {} | {} | {}", s.mean_query_count, pct(s.mr), pct(s.ap), pct(s.recall))
                        }
                        CellOutcome::Diverged { .. } => "GE | GE | GE | GE".into(),
                        CellOutcome::Failed { .. } => "failed | failed | failed | failed".into(),
                    };
                    let _ = writeln!(out, "| {} | {row} |", c.label);
                }
            }
            _ => {
                let head: Vec<&str> = self.cells.iter().map(|c| c.label.as_str()).collect();
                let _ = writeln!(out, "| metric | {} |", head.join(" | "));
                let _ = writeln!(out, "|---|{}", "---|".repeat(head.len()));
                let rows: [(&str, fn(&EvalSummary) -> f64); 3] =
                    [("MR", |s| s.mr), ("AP", |s| s.ap), ("Recall", |s| s.recall)];
                for (name, get) in rows {
                    let vals: Vec<String> = self
                        .cells
                        .iter()
                        .map(|c| match &c.outcome {
                            CellOutcome::Done(s) => pct(get(s)),
                            CellOutcome::Diverged { .. } => "GE".into(),
                            CellOutcome::Failed { .. } => "failed".into(),
                        })
                        .collect();
                    let _ = writeln!(out, "| {name} | {} |", vals.join(" | "));
                }
            }
        }
        let notes: Vec<String> = self
            .cells
            .iter()
            .filter_map(|c| match &c.outcome {
                CellOutcome::Diverged { detail } => Some(format!("{}: diverged ({detail})", c.label)),
                CellOutcome::Failed { detail } => Some(format!("{}: failed ({detail})", c.label)),
                CellOutcome::Done(_) => None,
            })
            .collect();
        if !notes.is_empty() {
            let _ = writeln!(out, "\nGE: training diverged (gradient explosion).");
            for n in notes {
                let _ = writeln!(out, "- {n}");
            }
        }
        out
    }
}

fn run_cell(config: &TrainConfig, dataset: &[Scene], out: Option<&Path>) -> (CellOutcome, Option<DetectorEval>) {
    match train(config, dataset, out) {
        Ok(r) => match r.final_eval {
            Some(e) => (CellOutcome::Done(e.summary()), Some(e)),
            None => (
                CellOutcome::Failed {
                    detail: "no held-out scenes to evaluate".into(),
                },
                None,
            ),
        },
        Err(Error::Diverged(d)) => (CellOutcome::Diverged { detail: d }, None),
        Err(e) => (CellOutcome::Failed { detail: e.to_string() }, None),
    }
}

/// Trains one model per grid cell with the base seed and tabulates held-out
/// metrics. Failing cells are recorded, never fatal.
pub fn ablate(base: &TrainConfig, dataset: &[Scene], axis: AblationAxis, out: Option<&Path>) -> AblationReport {
    let tokens = base.model.tokens();
    let cells: Vec<(String, TrainConfig)> = match &axis {
        AblationAxis::Multiplier(ms) => ms
            .iter()
            .map(|&(m, removal)| {
                let label = if removal { format!("removal(M={m})") } else { m.to_string() };
                let s = QueryStrategy {
                    kind: StrategyKind::Raqg { m, removal },
                    ..base.strategy
                };
                let s = if base.strategy.is_raqg() { s } else { QueryStrategy::raqg(m, removal, tokens) };
                (label, base.clone().with_strategy(s))
            })
            .collect(),
        AblationAxis::RankingLoss(ls) => ls
            .iter()
            .map(|&l| {
                let mut c = base.clone();
                c.ranking_loss = l;
                (l.name().to_string(), c)
            })
            .collect(),
        AblationAxis::Strategy(ss) => ss.iter().map(|&s| (s.name(), base.clone().with_strategy(s))).collect(),
    };
    let cells = cells
        .into_iter()
        .map(|(label, config)| {
            info!("ablation cell {label}");
            let (outcome, eval) = run_cell(&config, dataset, out);
            if !matches!(outcome, CellOutcome::Done(_)) {
                warn!("ablation cell {label}: {outcome:?}");
            }
            AblationCell { label, outcome, eval }
        })
        .collect();
    AblationReport { axis, cells }
}

/// Strategy comparison: one model per strategy, one table row each.
pub fn compare(base: &TrainConfig, dataset: &[Scene], strategies: &[QueryStrategy], out: Option<&Path>) -> AblationReport {
    ablate(base, dataset, AblationAxis::Strategy(strategies.to_vec()), out)
}

/// Evaluates already trained detectors side by side, one row per entry.
pub fn compare_models(runs: &[(String, &Detector, QueryStrategy)], scenes: &[Scene]) -> AblationReport {
    let cells = runs
        .iter()
        .map(|(label, model, strategy)| match evaluate_detector(model, scenes, strategy) {
            Ok(e) => AblationCell {
                label: label.clone(),
                outcome: CellOutcome::Done(e.summary()),
                eval: Some(e),
            },
            Err(e) => AblationCell {
                label: label.clone(),
                outcome: CellOutcome::Failed { detail: e.to_string() },
                eval: None,
            },
        })
        .collect();
    AblationReport {
        axis: AblationAxis::Strategy(runs.iter().map(|r| r.2).collect()),
        cells,
    }
}
