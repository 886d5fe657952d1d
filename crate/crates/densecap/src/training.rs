//! The joint training objective and the SGD loop. One iteration processes
//! one scene end to end: RPN losses over sampled anchors, then caption,
//! detection-score, and box-offset losses over GT-augmented proposals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{foreground_probs, match_proposals, propose, sample_training_boxes};
use crate::dataset::{merge_ground_truth, Scene, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{encode_offset, generate_anchors, BBox};
use crate::model::{Fusion, Fwd, Model, DOWNSAMPLE};
use crate::tensor::{SgdState, Tensor, Var};

/// Weights of the joint objective: total = cap + alpha*det + beta*bbox.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.1, beta: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// the learning rate halves every this many iterations
    pub lr_halving_interval: usize,
    pub momentum: f64,
    /// global gradient-norm clip
    pub clip_norm: f64,
    /// anchors sampled per iteration for the RPN losses
    pub sample_boxes: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// proposals kept per iteration before GT augmentation
    pub train_proposals: usize,
    /// NMS threshold on training proposals
    pub proposal_nms: f64,
    /// positive (and negative) proposals processed per iteration
    pub region_budget: usize,
    pub loss: LossConfig,
    pub log_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Minutes-scale settings for the desk-sized model.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 5000,
            base_lr: 0.05,
            lr_halving_interval: 2000,
            momentum: 0.9,
            clip_norm: 10.0,
            sample_boxes: 64,
            pos_iou: 0.7,
            neg_iou: 0.3,
            train_proposals: 12,
            proposal_nms: 0.7,
            region_budget: 6,
            loss: LossConfig::default(),
            log_every: 100,
            seed: 0,
        }
    }

    /// Settings matching the reference training recipe.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 600_000,
            base_lr: 0.001,
            lr_halving_interval: 100_000,
            momentum: 0.98,
            clip_norm: 10.0,
            sample_boxes: 256,
            pos_iou: 0.7,
            neg_iou: 0.3,
            train_proposals: 256,
            proposal_nms: 0.7,
            region_budget: 32,
            loss: LossConfig::default(),
            log_every: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(self.base_lr > 0.0) || self.lr_halving_interval == 0 {
            return Err(Error::Config("learning-rate schedule is degenerate".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum outside [0,1)".into()));
        }
        if self.sample_boxes == 0 || self.train_proposals == 0 || self.region_budget == 0 {
            return Err(Error::Config("sampling budgets must be positive".into()));
        }
        if !(self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0 && self.neg_iou >= 0.0) {
            return Err(Error::Config("need 0 <= neg_iou <= pos_iou <= 1".into()));
        }
        Ok(())
    }

    /// Stepwise-halved learning rate at an iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.base_lr * 0.5f64.powi((iteration / self.lr_halving_interval) as i32)
    }
}

/// Per-site loss components. The detection and box terms are computed in
/// both the proposal network and the final prediction:
/// total = cap + alpha*(det_rpn + det_final) + beta*(bbox_rpn + bbox_final).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cap: f64,
    pub det_rpn: f64,
    pub det_final: f64,
    pub bbox_rpn: f64,
    pub bbox_final: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Reassemble the total from components (the identity the training
    /// loop asserts every logged iteration).
    pub fn reassembled(&self, loss: &LossConfig) -> f64 {
        self.cap
            + loss.alpha * (self.det_rpn + self.det_final)
            + loss.beta * (self.bbox_rpn + self.bbox_final)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Encode one reference caption of a region, clipped to the decoder's step
/// budget. `pick` selects among multiple references.
fn encode_caption(
    vocab: &Vocabulary,
    captions: &[Vec<String>],
    pick: usize,
    max_steps: usize,
) -> Vec<usize> {
    let toks = &captions[pick % captions.len()];
    let mut ids = vocab.encode_caption(toks);
    ids.truncate(max_steps - 1);
    ids
}

/// Build the full joint loss for one scene. Returns the graph (so the
/// caller can run backward), the scalar loss Var, and its breakdown.
pub fn scene_loss<'m>(
    model: &'m Model,
    scene: &Scene,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    trainable: bool,
) -> Result<(Fwd<'m>, Var, LossBreakdown)> {
    let gt = merge_ground_truth(&scene.regions, 0.7);
    if gt.is_empty() {
        return Err(Error::Data("scene has no regions".into()));
    }
    let gt_boxes: Vec<BBox> = gt.iter().map(|r| r.bbox).collect();
    let (img_h, img_w) = (scene.height() as f64, scene.width() as f64);

    let mut fwd = model.fwd(trainable);
    let fm = fwd.backbone(&scene.image)?;
    let rpn = fwd.rpn(&fm)?;
    let anchors = generate_anchors(&model.cfg.anchors, fm.height, fm.width, DOWNSAMPLE);

    // --- first stage: RPN objectness and offsets over sampled anchors ----
    let sample =
        sample_training_boxes(&anchors, &gt_boxes, cfg.sample_boxes, cfg.pos_iou, cfg.neg_iou, rng)?;
    let mut rows: Vec<usize> = sample.positives.iter().map(|&(a, _)| a).collect();
    let mut cls_targets = vec![1usize; rows.len()];
    rows.extend(&sample.negatives);
    cls_targets.resize(rows.len(), 0);
    let picked_cls = fwd.g.select_rows(rpn.cls, &rows)?;
    let det_rpn = Some(fwd.g.softmax_cross_entropy(picked_cls, &cls_targets)?);

    let bbox_rpn = if sample.positives.is_empty() {
        None
    } else {
        let pos_rows: Vec<usize> = sample.positives.iter().map(|&(a, _)| a).collect();
        let picked_reg = fwd.g.select_rows(rpn.reg, &pos_rows)?;
        let mut tgt = Vec::with_capacity(pos_rows.len() * 4);
        for &(a, g) in &sample.positives {
            tgt.extend(encode_offset(&gt_boxes[g], &anchors[a]).as_array());
        }
        let tgt = fwd.g.constant(Tensor::from_vec(&[pos_rows.len(), 4], tgt)?);
        Some(fwd.g.smooth_l1(picked_reg, tgt)?)
    };

    // --- second stage over GT-augmented proposals -------------------------
    let fg = foreground_probs(fwd.g.value(rpn.cls));
    let reg_values = fwd.g.value(rpn.reg).to_vec();
    let proposals = propose(
        &fg,
        &reg_values,
        &anchors,
        img_w,
        img_h,
        cfg.train_proposals,
        cfg.proposal_nms,
    )?;
    let mut boxes = proposals.boxes;
    boxes.extend(&gt_boxes); // every GT participates even if the RPN is cold
    // final-site negatives: everything below the positive threshold. The
    // RPN keeps its ignore band, but leaving mid-IoU proposals untrained
    // here lets them reach evaluation with arbitrary confident scores.
    let (mut pos, mut neg) = match_proposals(&boxes, &gt_boxes, cfg.pos_iou, cfg.pos_iou);
    pos.shuffle(rng);
    pos.truncate(cfg.region_budget);
    neg.shuffle(rng);
    // negatives only feed the detection head (one decode step each), so a
    // larger helping is nearly free and sharpens the confidence ranking
    neg.truncate(cfg.region_budget * 2);

    let context = match model.cfg.fusion {
        Fusion::None => None,
        _ => {
            let whole = BBox::new(0.0, 0.0, img_w, img_h)?;
            Some(fwd.region_feature(&fm, &whole)?)
        }
    };

    let mut cap_terms = Vec::new();
    let mut det_logit_rows = Vec::new();
    let mut det_targets = Vec::new();
    let mut offset_preds = Vec::new();
    let mut offset_targets = Vec::new();
    for &(pi, gi) in &pos {
        let feat = fwd.region_feature(&fm, &boxes[pi])?;
        let pick = rng.gen_range(0..gt[gi].captions.len());
        let words = encode_caption(vocab, &gt[gi].captions, pick, model.cfg.max_steps);
        let out = fwd.head_forward(feat, context, &words)?;
        cap_terms.push(fwd.g.softmax_cross_entropy(out.word_logits, &out.word_targets)?);
        det_logit_rows.push(out.det_logits);
        det_targets.push(1usize);
        offset_preds.push(out.offset);
        offset_targets.extend(encode_offset(&gt_boxes[gi], &boxes[pi]).as_array());
    }
    for &pi in &neg {
        let feat = fwd.region_feature(&fm, &boxes[pi])?;
        let det = fwd.head_forward(feat, context, &[])?.det_logits;
        det_logit_rows.push(det);
        det_targets.push(0);
    }
    let det_final = if det_logit_rows.is_empty() {
        None
    } else {
        let logits = fwd.g.concat_rows(&det_logit_rows)?;
        Some(fwd.g.softmax_cross_entropy(logits, &det_targets)?)
    };
    let bbox_final = if offset_preds.is_empty() {
        None
    } else {
        let preds = fwd.g.concat_rows(&offset_preds)?;
        let tgt = fwd.g.constant(Tensor::from_vec(&[offset_preds.len(), 4], offset_targets)?);
        Some(fwd.g.smooth_l1(preds, tgt)?)
    };
    // mean-per-region caption loss (each term is already mean-per-step)
    let cap = if cap_terms.is_empty() {
        None
    } else {
        let mut acc = cap_terms[0];
        for &t in &cap_terms[1..] {
            acc = fwd.g.add(acc, t)?;
        }
        Some(fwd.g.scale(acc, 1.0 / cap_terms.len() as f64)?)
    };

    // --- combine: total = cap + alpha*det + beta*bbox ----------------------
    let mut total = fwd.g.scalar(0.0);
    let add_weighted = |fwd: &mut Fwd<'m>,
                            total: Var,
                            term: Option<Var>,
                            weight: f64|
     -> Result<(Var, f64)> {
        match term {
            None => Ok((total, 0.0)),
            Some(v) => {
                let value = fwd.g.value(v)[0];
                let s = fwd.g.scale(v, weight)?;
                Ok((fwd.g.add(total, s)?, value))
            }
        }
    };
    let (t, cap_v) = add_weighted(&mut fwd, total, cap, 1.0)?;
    let (t, det_rpn_v) = add_weighted(&mut fwd, t, det_rpn, cfg.loss.alpha)?;
    let (t, det_final_v) = add_weighted(&mut fwd, t, det_final, cfg.loss.alpha)?;
    let (t, bbox_rpn_v) = add_weighted(&mut fwd, t, bbox_rpn, cfg.loss.beta)?;
    let (t, bbox_final_v) = add_weighted(&mut fwd, t, bbox_final, cfg.loss.beta)?;
    total = t;
    let breakdown = LossBreakdown {
        cap: cap_v,
        det_rpn: det_rpn_v,
        det_final: det_final_v,
        bbox_rpn: bbox_rpn_v,
        bbox_final: bbox_final_v,
        total: fwd.g.value(total)[0],
    };
    Ok((fwd, total, breakdown))
}

/// Build a context-fusion model warm-started from a context-free one. The
/// fusion parameters start at the identity of their operation, so the new
/// model's outputs match the base until the first update.
pub fn finetune_with_context(
    base: &Model,
    fusion: crate::model::Fusion,
    fusion_op: crate::model::FusionOp,
    seed: u64,
) -> Result<Model> {
    if fusion == Fusion::None {
        return Err(Error::Config("fine-tuning target must use context fusion".into()));
    }
    if base.cfg.fusion != Fusion::None {
        return Err(Error::Config("fine-tuning base must be a context-free model".into()));
    }
    let mut cfg = base.cfg.clone();
    cfg.fusion = fusion;
    cfg.fusion_op = fusion_op;
    let mut model = Model::new(cfg, seed)?;
    model.load_base_params(&base.store)?;
    Ok(model)
}

/// SGD training loop. Scenes are visited in a seeded shuffled order, one
/// per iteration. On a numerical blow-up the model is restored to the last
/// logged state and the error is propagated.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261696e));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);

    let mut sgd = SgdState::new(&model.store, cfg.lr_at(0), cfg.momentum)?;
    let mut logs = Vec::new();
    let mut last_good = model.store.clone();
    for it in 0..cfg.iterations {
        if it > 0 && it % scenes.len() == 0 {
            order.shuffle(&mut rng);
        }
        let scene = &scenes[order[it % scenes.len()]];
        let step = (|| -> Result<(LossBreakdown, f64)> {
            let (fwd, total, breakdown) =
                scene_loss(model, scene, vocab, cfg, &mut rng, true)?;
            let mut graph = fwd.into_graph();
            graph.backward(total)?;
            model.store.zero_grads();
            graph.flush_grads(&mut model.store);
            let norm = model.store.grad_norm();
            model.store.clip_grad_norm(cfg.clip_norm);
            sgd.learning_rate = cfg.lr_at(it);
            sgd.step(&mut model.store);
            Ok((breakdown, norm))
        })();
        match step {
            Ok((loss, grad_norm)) => {
                debug_assert!(
                    (loss.total - loss.reassembled(&cfg.loss)).abs() <= 1e-12,
                    "loss breakdown identity violated at iteration {it}"
                );
                if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
                    let entry = TrainLog { iteration: it, lr: cfg.lr_at(it), loss, grad_norm };
                    on_log(&entry);
                    logs.push(entry);
                    last_good = model.store.clone();
                }
            }
            Err(e @ Error::NonFinite { .. }) => {
                model.store = last_good;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(logs)
}
