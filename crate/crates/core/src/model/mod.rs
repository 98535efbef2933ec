//! The desk-scale detector: patch backbone, transformer encoder with dense
//! proposals, ranking head, query generation, transformer decoder and
//! detection heads.
//!
//! Token features are stored tokens-by-channels (`N x C`), the transpose of
//! the usual `C x N` notation, so every projection is a right-multiplication.

mod layers;

use log::warn;
use serde::{Deserialize, Serialize};

pub use layers::{DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention};

use crate::autodiff::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::BBox;
use crate::raqg::{QueryStrategy, StrategyKind};
use crate::rng::{stream, Stream};

/// Anchor coordinates are kept this far from 0 and 1 before the logit.
pub const ANCHOR_CLAMP: f64 = 1e-6;

/// Prior probability behind the initial classification bias.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Width/height of the per-token reference box used by encoder proposals.
    pub anchor_size: f64,
    /// Initial bias of the ranking head's last layer.
    pub rank_bias_init: f64,
    /// Block ranking-head gradients from reaching the encoder.
    pub detach_ranking_input: bool,
    /// Number of free query slots; set only for the learnable-parameter strategy.
    pub lp_queries: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            hidden_dim: 64,
            embed_dim: 64,
            ffn_dim: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            anchor_size: 0.15,
            rank_bias_init: 1.0,
            detach_ranking_input: false,
            lp_queries: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.anchor_size > 0.0 && self.anchor_size < 1.0) {
            return Err(Error::Config("anchor_size must lie in (0, 1)".into()));
        }
        if self.lp_queries == Some(0) {
            return Err(Error::Config("lp_queries must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Per-token encoder predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseProposals {
    pub scores: Vec<f64>,
    pub boxes: Vec<BBox>,
}

impl DenseProposals {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Token indices ordered by score, highest first; ties keep token order.
    pub fn ranked(&self) -> Vec<usize> {
        rank_descending(&self.scores)
    }
}

/// Stable descending argsort.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `N x C` refined token features.
    pub x_enc: Var,
    /// `N x 1` proposal logits.
    pub logits: Var,
    /// `N x 4` proposal boxes.
    pub boxes: Var,
}

/// Decoder queries: anchor boxes plus their embeddings.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// Originating token of each query; empty for free (learned) queries.
    pub tokens: Vec<usize>,
    pub anchors: Vec<BBox>,
    /// `X x 4` anchors in (0, 1).
    pub anchor_var: Var,
    /// `X x 4` inverse-sigmoid of the anchors.
    pub anchor_logits: Var,
    /// `X x E`.
    pub embeddings: Var,
}

impl QuerySet {
    pub fn count(&self) -> usize {
        self.anchors.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `X x 1`.
    pub logits: Var,
    /// `X x 4`.
    pub boxes: Var,
}

/// Reads `(box, sigmoid(logit))` pairs back from the tape.
pub fn read_detections(tape: &Tape, logits: Var, boxes: Var) -> Vec<Detection> {
    tape.value(logits)
        .iter()
        .zip(tape.value(boxes).chunks(4))
        .map(|(&l, b)| Detection {
            bbox: BBox::from_array(b),
            score: sigmoid(l),
        })
        .collect()
}

fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(ANCHOR_CLAMP, 1.0 - ANCHOR_CLAMP);
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug)]
struct LearnedQueries {
    embeddings: ParamId,
    anchor_logits: ParamId,
}

/// Everything [`Detector::infer`] produces for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub query_count: usize,
    pub anchors: Vec<BBox>,
    pub rank_prediction: f64,
    pub proposals: DenseProposals,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: ModelConfig,
    pub store: ParamStore,
    patch_proj: Linear,
    pos_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    proposal_score: Linear,
    proposal_box: Linear,
    rank_attn: MultiHeadAttention,
    rank_fc: [Linear; 3],
    query_embed: Mlp,
    embed_proj: Option<Linear>,
    query_pos: Linear,
    learned: Option<LearnedQueries>,
    decoder: Vec<DecoderLayer>,
    class_head: Linear,
    box_head: Mlp,
    grid: Vec<BBox>,
}

impl Detector {
    /// Builds a freshly initialised model; weights come from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let c = config.hidden_dim;
        let e = config.embed_dim;
        let f = config.ffn_dim;
        let h = config.heads;
        let n = config.tokens();

        let patch_proj = Linear::new(&mut store, "backbone.proj", config.patch_dim(), c, &mut rng)?;
        let pos_embed = store.add_uniform("backbone.pos_embed", &[n, c], 1, &mut rng)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.{i}"), c, f, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let proposal_score = Linear::new(&mut store, "encoder.score", c, 1, &mut rng)?;
        let proposal_box = Linear::zeroed(&mut store, "encoder.box", c, 4)?;

        let rank_attn = MultiHeadAttention::new(&mut store, "rank.attn", c, h, &mut rng)?;
        let rank_fc = [
            Linear::new(&mut store, "rank.fc0", c, c, &mut rng)?,
            Linear::new(&mut store, "rank.fc1", c, c, &mut rng)?,
            Linear::new(&mut store, "rank.fc2", c, 1, &mut rng)?,
        ];

        let query_embed = Mlp::new(&mut store, "query.embed", &[4, e, e], &mut rng)?;
        let embed_proj = if e != c {
            Some(Linear::new(&mut store, "query.embed_proj", e, c, &mut rng)?)
        } else {
            None
        };
        let query_pos = Linear::new(&mut store, "query.pos", 4, c, &mut rng)?;
        let learned = match config.lp_queries {
            Some(k) => {
                let embeddings = store.add_uniform("query.learned_embed", &[k, e], 1, &mut rng)?;
                // Uniform anchors over the image, as logits.
                let side = (k as f64).sqrt().ceil() as usize;
                let mut logits = Vec::with_capacity(k * 4);
                for i in 0..k {
                    let (gx, gy) = (i % side, i / side);
                    let cx = (gx as f64 + 0.5) / side as f64;
                    let cy = (gy as f64 + 0.5) / side.max(k.div_ceil(side)) as f64;
                    logits.extend([cx, cy, config.anchor_size, config.anchor_size].map(inverse_sigmoid));
                }
                let anchor_logits = store.add("query.learned_anchor", Tensor::new(vec![k, 4], logits)?)?;
                Some(LearnedQueries {
                    embeddings,
                    anchor_logits,
                })
            }
            None => None,
        };
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder.{i}"), c, f, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let class_head = Linear::new(&mut store, "head.class", c, 1, &mut rng)?;
        let box_head = Mlp::new(&mut store, "head.box", &[c, c, c, 4], &mut rng)?;
        for id in box_head.layers[box_head.layers.len() - 1].params() {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }

        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        store.get_mut(proposal_score.bias).tensor.data_mut().fill(prior_bias);
        store.get_mut(class_head.bias).tensor.data_mut().fill(prior_bias);
        store.get_mut(rank_fc[2].bias).tensor.data_mut().fill(config.rank_bias_init);

        let side = config.grid_side();
        let grid = (0..n)
            .map(|t| {
                let (gx, gy) = (t % side, t / side);
                BBox::new(
                    (gx as f64 + 0.5) / side as f64,
                    (gy as f64 + 0.5) / side as f64,
                    config.anchor_size,
                    config.anchor_size,
                )
            })
            .collect();

        Ok(Detector {
            config,
            store,
            patch_proj,
            pos_embed,
            encoder,
            proposal_score,
            proposal_box,
            rank_attn,
            rank_fc,
            query_embed,
            embed_proj,
            query_pos,
            learned,
            decoder,
            class_head,
            box_head,
            grid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Reference box of every token, in token order.
    pub fn grid(&self) -> &[BBox] {
        &self.grid
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    /// Parameters of the ranking head.
    pub fn ranking_params(&self) -> Vec<ParamId> {
        let a = &self.rank_attn;
        let mut ids: Vec<ParamId> = [&a.q, &a.k, &a.v, &a.out].iter().flat_map(|l| l.params()).collect();
        ids.extend(self.rank_fc.iter().flat_map(Linear::params));
        ids
    }

    pub fn box_delta_params(&self) -> Vec<ParamId> {
        self.box_head.params()
    }

    /// `C x S x S` image to `N x (C p p)` patch rows, tokens in row-major grid order.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (ch, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
        if image.shape() != [ch, s, s] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                [ch, s, s]
            )));
        }
        let side = s / p;
        let src = image.data();
        let mut out = Vec::with_capacity(src.len());
        for ty in 0..side {
            for tx in 0..side {
                for c in 0..ch {
                    for py in 0..p {
                        let row = (c * s + ty * p + py) * s + tx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![side * side, cfg.patch_dim()], out)
    }

    /// Patch projection plus learned positional embedding: `N x C`.
    pub fn backbone_forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let patches = self.patchify(image)?;
        let x = tape.leaf(&patches);
        let x = self.patch_proj.forward(tape, &self.store, x)?;
        let pos = tape.param(&self.store, self.pos_embed);
        tape.add(x, pos)
    }

    /// Runs the encoder over `N x C` tokens. `reference` holds one box per
    /// token (normally [`Detector::grid`]); proposal boxes refine it.
    pub fn encoder_forward(&self, tape: &mut Tape, x_bac: Var, reference: &[BBox]) -> Result<EncoderOutput> {
        let (n, _) = tape.dims2(x_bac)?;
        if reference.len() != n {
            return Err(Error::dim(format!("{} reference boxes for {n} tokens", reference.len())));
        }
        let mut x = x_bac;
        for layer in &self.encoder {
            x = layer.forward(tape, &self.store, x)?;
        }
        let logits = self.proposal_score.forward(tape, &self.store, x)?;
        let delta = self.proposal_box.forward(tape, &self.store, x)?;
        let ref_logits: Vec<f64> = reference
            .iter()
            .flat_map(|b| b.to_array().map(inverse_sigmoid))
            .collect();
        let r = tape.constant(vec![n, 4], ref_logits)?;
        let z = tape.add(delta, r)?;
        let boxes = tape.sigmoid(z);
        Ok(EncoderOutput { x_enc: x, logits, boxes })
    }

    pub fn proposals(&self, tape: &Tape, enc: &EncoderOutput) -> DenseProposals {
        let dets = read_detections(tape, enc.logits, enc.boxes);
        DenseProposals {
            scores: dets.iter().map(|d| d.score).collect(),
            boxes: dets.iter().map(|d| d.bbox).collect(),
        }
    }

    /// Predicted ranking `R >= 0` from the encoder features (`1 x 1` node).
    pub fn ranking_head_forward(&self, tape: &mut Tape, x_enc: Var) -> Result<Var> {
        Ok(self.ranking_head_with_weights(tape, x_enc)?.0)
    }

    /// Ranking head output plus its per-head attention weight nodes.
    pub fn ranking_head_with_weights(&self, tape: &mut Tape, x_enc: Var) -> Result<(Var, Vec<Var>)> {
        let x = if self.config.detach_ranking_input {
            tape.detach(x_enc)
        } else {
            x_enc
        };
        let q = tape.mean(x, 0)?;
        let (pooled, weights) = self.rank_attn.forward_with_weights(tape, &self.store, q, x, x)?;
        let h = self.rank_fc[0].forward(tape, &self.store, pooled)?;
        let h = tape.relu(h);
        let h = self.rank_fc[1].forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        let r = self.rank_fc[2].forward(tape, &self.store, h)?;
        Ok((tape.relu(r), weights))
    }

    /// Queries from the `count` highest-scoring proposals. Out-of-range
    /// counts are clamped into `[1, N]` with a warning.
    pub fn query_generate(&self, tape: &mut Tape, proposals: &DenseProposals, count: usize) -> Result<QuerySet> {
        let n = proposals.len();
        if n == 0 {
            return Err(Error::dim("no proposals to select from"));
        }
        let x = count.clamp(1, n);
        if x != count {
            warn!("query count {count} outside [1, {n}], using {x}");
        }
        let tokens: Vec<usize> = proposals.ranked().into_iter().take(x).collect();
        let anchors: Vec<BBox> = tokens.iter().map(|&t| proposals.boxes[t]).collect();
        self.queries_from_anchors(tape, tokens, anchors)
    }

    /// Queries anchored on arbitrary boxes (detached from any graph).
    pub fn queries_from_anchors(&self, tape: &mut Tape, tokens: Vec<usize>, anchors: Vec<BBox>) -> Result<QuerySet> {
        let x = anchors.len();
        let clamped: Vec<f64> = anchors
            .iter()
            .flat_map(|b| b.to_array().map(|v| v.clamp(ANCHOR_CLAMP, 1.0 - ANCHOR_CLAMP)))
            .collect();
        let logits: Vec<f64> = clamped.iter().map(|&v| inverse_sigmoid(v)).collect();
        let anchor_var = tape.constant(vec![x, 4], clamped)?;
        let anchor_logits = tape.constant(vec![x, 4], logits)?;
        let embeddings = self.query_embed.forward(tape, &self.store, anchor_var)?;
        Ok(QuerySet {
            tokens,
            anchors,
            anchor_var,
            anchor_logits,
            embeddings,
        })
    }

    /// Image-independent queries of the learnable-parameter strategy.
    pub fn learned_queries(&self, tape: &mut Tape) -> Result<QuerySet> {
        let lq = self
            .learned
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without learned query slots".into()))?;
        let anchor_logits = tape.param(&self.store, lq.anchor_logits);
        let anchor_var = tape.sigmoid(anchor_logits);
        let embeddings = tape.param(&self.store, lq.embeddings);
        let anchors = tape.value(anchor_var).chunks(4).map(BBox::from_array).collect();
        Ok(QuerySet {
            tokens: Vec::new(),
            anchors,
            anchor_var,
            anchor_logits,
            embeddings,
        })
    }

    /// `X x C` decoder features.
    pub fn decoder_forward(&self, tape: &mut Tape, x_enc: Var, queries: &QuerySet) -> Result<Var> {
        let mut tgt = match &self.embed_proj {
            Some(p) => p.forward(tape, &self.store, queries.embeddings)?,
            None => queries.embeddings,
        };
        let pos = self.query_pos.forward(tape, &self.store, queries.anchor_var)?;
        for layer in &self.decoder {
            tgt = layer.forward(tape, &self.store, tgt, pos, x_enc)?;
        }
        Ok(tgt)
    }

    /// Scores and anchor-relative boxes: `sigmoid(logit(anchor) + delta)`.
    pub fn detection_heads(&self, tape: &mut Tape, x_dec: Var, queries: &QuerySet) -> Result<HeadOutput> {
        let logits = self.class_head.forward(tape, &self.store, x_dec)?;
        let delta = self.box_head.forward(tape, &self.store, x_dec)?;
        let z = tape.add(delta, queries.anchor_logits)?;
        let boxes = tape.sigmoid(z);
        Ok(HeadOutput { logits, boxes })
    }

    /// Full forward pass without gradient bookkeeping beyond the tape itself.
    pub fn infer(&self, image: &Tensor, strategy: &QueryStrategy) -> Result<Inference> {
        let mut tape = Tape::new();
        let x_bac = self.backbone_forward(&mut tape, image)?;
        let enc = self.encoder_forward(&mut tape, x_bac, &self.grid)?;
        let proposals = self.proposals(&tape, &enc);
        let r = self.ranking_head_forward(&mut tape, enc.x_enc)?;
        let rank_prediction = tape.scalar(r);
        let queries = match strategy.kind {
            StrategyKind::LearnableParameters { .. } => self.learned_queries(&mut tape)?,
            _ => {
                let x = strategy.inference_count(rank_prediction)?;
                self.query_generate(&mut tape, &proposals, x)?
            }
        };
        let x_dec = self.decoder_forward(&mut tape, enc.x_enc, &queries)?;
        let heads = self.detection_heads(&mut tape, x_dec, &queries)?;
        Ok(Inference {
            detections: read_detections(&tape, heads.logits, heads.boxes),
            query_count: queries.count(),
            anchors: queries.anchors,
            rank_prediction,
            proposals,
        })
    }
}
