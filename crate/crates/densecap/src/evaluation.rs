//! The dense-captioning metric and inference pipeline: Meteor-lite caption
//! similarity, greedy prediction/GT matching, average precision over an
//! IoU-by-similarity threshold grid, and the two-round-NMS evaluator with
//! its hyperparameter sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{foreground_probs, propose};
use crate::dataset::{merge_ground_truth, RegionAnnotation, Scene, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{decode_offset, generate_anchors, iou, nms, BBox};
use crate::model::{Fusion, Model, DOWNSAMPLE};

pub const IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const SIM_THRESHOLDS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub sim_thresholds: Vec<f64>,
    /// proposal budget after the first NMS round
    pub proposals: usize,
    /// first-round NMS on proposals
    pub nms_r1: f64,
    /// second-round NMS on final boxes
    pub nms_r2: f64,
    /// IoU above which GT regions merge into one multi-reference region
    pub merge_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: IOU_THRESHOLDS.to_vec(),
            sim_thresholds: SIM_THRESHOLDS.to_vec(),
            proposals: 300,
            nms_r1: 0.7,
            nms_r2: 0.3,
            merge_iou: 0.7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.iou_thresholds.is_empty() || self.sim_thresholds.is_empty() {
            return Err(Error::Config("threshold lists must be non-empty".into()));
        }
        if !sorted(&self.iou_thresholds) || !sorted(&self.sim_thresholds) {
            return Err(Error::Config("thresholds must be sorted ascending".into()));
        }
        for &r in [self.nms_r1, self.nms_r2, self.merge_iou].iter() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("IoU ratio {r} outside [0,1]")));
            }
        }
        if self.proposals == 0 {
            return Err(Error::Config("proposal budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// One scored region description.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub confidence: f64,
    pub caption: Vec<String>,
}

/// Dropped-output tallies from the inference pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub proposals: usize,
    pub predictions: usize,
    pub dropped_empty_caption: usize,
    pub dropped_degenerate_box: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// AP per (iou threshold, sim threshold)
    pub ap_grid: Vec<Vec<f64>>,
    /// arithmetic mean of all grid cells
    pub map: f64,
    pub iou_thresholds: Vec<f64>,
    pub sim_thresholds: Vec<f64>,
    pub counts: EvalCounts,
    /// kept predictions per scene, confidence-sorted
    pub predictions: Vec<Vec<Prediction>>,
}

impl EvalReport {
    /// Aligned-text table of the grid plus the mAP line.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("  iou\\sim");
        for s in &self.sim_thresholds {
            out.push_str(&format!(" {s:>8.2}"));
        }
        out.push('\n');
        for (i, iou_t) in self.iou_thresholds.iter().enumerate() {
            out.push_str(&format!("  {iou_t:>7.2}"));
            for ap in &self.ap_grid[i] {
                out.push_str(&format!(" {ap:>8.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("  mAP {:.6}\n", self.map));
        out
    }

    /// Machine-readable lines: `ap <iou> <sim> <value>` then `map <value>`.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for (i, iou_t) in self.iou_thresholds.iter().enumerate() {
            for (j, sim_t) in self.sim_thresholds.iter().enumerate() {
                out.push_str(&format!("ap {iou_t} {sim_t} {:.9}\n", self.ap_grid[i][j]));
            }
        }
        out.push_str(&format!("map {:.9}\n", self.map));
        out
    }
}

// ---------------------------------------------------------------------------
// Meteor-lite
// ---------------------------------------------------------------------------

/// Exact-match unigram similarity with a fragmentation penalty.
///
/// The alignment matches as many unigrams as possible (per token type,
/// min of the two occurrence counts) and, among maximal alignments, picks
/// one with the fewest crossings (ties: fewest chunks). With m matches,
/// P = m/|pred|, R = m/|ref|, F = 10PR/(R+9P), ch = chunk count,
/// penalty = 0.5*(ch/m)^3, score = F*(1-penalty).
pub fn meteor_lite(pred: &[String], reference: &[String]) -> Result<f64> {
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::Usage("meteor_lite on an empty caption".into()));
    }
    // candidate/reference positions per shared token type
    let mut by_type: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, t) in pred.iter().enumerate() {
        by_type.entry(t.as_str()).or_default().0.push(i);
    }
    for (j, t) in reference.iter().enumerate() {
        if let Some(e) = by_type.get_mut(t.as_str()) {
            e.1.push(j);
        }
    }
    by_type.retain(|_, (a, b)| !a.is_empty() && !b.is_empty());
    let m: usize = by_type.values().map(|(a, b)| a.len().min(b.len())).sum();
    if m == 0 {
        return Ok(0.0);
    }

    // exhaustively choose, per type, which occurrences participate
    // (order-preserving pairing within a type), minimizing crossings
    let types: Vec<(&Vec<usize>, &Vec<usize>, usize)> =
        by_type.values().map(|(a, b)| (a, b, a.len().min(b.len()))).collect();
    let mut best: Option<(usize, usize)> = None; // (crossings, chunks)
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(m);
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(k);
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        rec(0, n, k, &mut cur, &mut out);
        out
    }
    fn score_alignment(pairs: &[(usize, usize)]) -> (usize, usize) {
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable();
        let mut crossings = 0;
        for i in 0..sorted.len() {
            for j in i + 1..sorted.len() {
                if sorted[i].1 > sorted[j].1 {
                    crossings += 1;
                }
            }
        }
        let mut chunks = 1;
        for w in sorted.windows(2) {
            if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
                chunks += 1;
            }
        }
        (crossings, chunks)
    }
    fn explore(
        types: &[(&Vec<usize>, &Vec<usize>, usize)],
        idx: usize,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut Option<(usize, usize)>,
        subsets: &dyn Fn(usize, usize) -> Vec<Vec<usize>>,
    ) {
        if idx == types.len() {
            let s = score_alignment(pairs);
            if best.map(|b| s < b).unwrap_or(true) {
                *best = Some(s);
            }
            return;
        }
        let (cand, refp, k) = types[idx];
        for cs in subsets(cand.len(), k) {
            for rs in subsets(refp.len(), k) {
                let start = pairs.len();
                for (ci, ri) in cs.iter().zip(&rs) {
                    pairs.push((cand[*ci], refp[*ri]));
                }
                explore(types, idx + 1, pairs, best, subsets);
                pairs.truncate(start);
            }
        }
    }
    explore(&types, 0, &mut pairs, &mut best, &subsets);
    let (_, chunks) = best.unwrap();

    let p = m as f64 / pred.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f * (1.0 - penalty))
}

/// Max Meteor-lite over a merged region's reference captions.
pub fn similarity(pred: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Usage("similarity needs at least one reference".into()));
    }
    let mut best: f64 = 0.0;
    for r in references {
        best = best.max(meteor_lite(pred, r)?);
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// AP
// ---------------------------------------------------------------------------

/// A prediction with precomputed (IoU, similarity) against every GT region
/// of its scene, so the grid reuses one matching table.
#[derive(Debug, Clone)]
struct ScoredPred {
    confidence: f64,
    scene: usize,
    /// (gt index within scene, iou, sim)
    overlaps: Vec<(usize, f64, f64)>,
}

/// Greedy matching and all-point-interpolated average precision for one
/// threshold pair. `preds` must be sorted by descending confidence.
fn ap_at(preds: &[ScoredPred], gt_counts: &[usize], iou_t: f64, sim_t: f64) -> f64 {
    let total_gt: usize = gt_counts.iter().sum();
    if total_gt == 0 || preds.is_empty() {
        return 0.0;
    }
    let mut offsets = vec![0usize; gt_counts.len()];
    let mut acc = 0;
    for (i, &c) in gt_counts.iter().enumerate() {
        offsets[i] = acc;
        acc += c;
    }
    let mut matched = vec![false; total_gt];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for &(gi, ov, sim) in &p.overlaps {
            if ov >= iou_t && sim >= sim_t && !matched[offsets[p.scene] + gi] {
                // highest IoU wins; ties go to the lower GT index, which
                // comes first in the overlap list
                if best.map(|(_, b)| ov > b).unwrap_or(true) {
                    best = Some((gi, ov));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[offsets[p.scene] + gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    average_precision(&tp_flags, total_gt)
}

/// All-point interpolation: integrate the precision envelope over recall.
pub fn average_precision(tp_flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    // precision envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// AP for one threshold pair over per-scene predictions and merged GT.
/// Exposed for fixture tests; `evaluate` uses the same path via the grid.
pub fn match_and_ap(
    predictions: &[Vec<Prediction>],
    gt: &[Vec<RegionAnnotation>],
    iou_t: f64,
    sim_t: f64,
) -> Result<f64> {
    let (preds, gt_counts) = score_table(predictions, gt)?;
    Ok(ap_at(&preds, &gt_counts, iou_t, sim_t))
}

fn score_table(
    predictions: &[Vec<Prediction>],
    gt: &[Vec<RegionAnnotation>],
) -> Result<(Vec<ScoredPred>, Vec<usize>)> {
    if predictions.len() != gt.len() {
        return Err(Error::Usage("prediction/GT scene counts differ".into()));
    }
    let mut preds = Vec::new();
    for (scene, (ps, gs)) in predictions.iter().zip(gt).enumerate() {
        for p in ps {
            if !p.confidence.is_finite() {
                return Err(Error::Domain("non-finite prediction confidence".into()));
            }
            let mut overlaps = Vec::with_capacity(gs.len());
            for (gi, g) in gs.iter().enumerate() {
                let ov = iou(&p.bbox, &g.bbox);
                if ov > 0.0 {
                    overlaps.push((gi, ov, similarity(&p.caption, &g.captions)?));
                }
            }
            preds.push(ScoredPred { confidence: p.confidence, scene, overlaps });
        }
    }
    preds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    Ok((preds, gt.iter().map(|g| g.len()).collect()))
}

/// Full grid + mAP over already-produced predictions.
pub fn ap_grid(
    predictions: &[Vec<Prediction>],
    gt: &[Vec<RegionAnnotation>],
    iou_thresholds: &[f64],
    sim_thresholds: &[f64],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let (preds, gt_counts) = score_table(predictions, gt)?;
    let mut grid = Vec::with_capacity(iou_thresholds.len());
    let mut sum = 0.0;
    for &iou_t in iou_thresholds {
        let mut row = Vec::with_capacity(sim_thresholds.len());
        for &sim_t in sim_thresholds {
            let ap = ap_at(&preds, &gt_counts, iou_t, sim_t);
            sum += ap;
            row.push(ap);
        }
        grid.push(row);
    }
    let cells = (iou_thresholds.len() * sim_thresholds.len()) as f64;
    Ok((grid, sum / cells))
}

// ---------------------------------------------------------------------------
// Inference pipeline
// ---------------------------------------------------------------------------

/// Run the full pipeline on one scene: propose, decode each proposal,
/// apply the offset, second NMS. Returns confidence-sorted predictions.
pub fn predict_scene(
    model: &Model,
    scene: &Scene,
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<(Vec<Prediction>, EvalCounts)> {
    let mut counts = EvalCounts::default();
    let (img_h, img_w) = (scene.height() as f64, scene.width() as f64);
    let mut fwd = model.fwd(false);
    let fm = fwd.backbone(&scene.image)?;
    let rpn = fwd.rpn(&fm)?;
    let anchors = generate_anchors(&model.cfg.anchors, fm.height, fm.width, DOWNSAMPLE);
    let fg = foreground_probs(fwd.g.value(rpn.cls));
    let reg = fwd.g.value(rpn.reg).to_vec();
    let proposals = propose(&fg, &reg, &anchors, img_w, img_h, cfg.proposals, cfg.nms_r1)?;
    counts.proposals = proposals.boxes.len();

    let context = match model.cfg.fusion {
        Fusion::None => None,
        _ => Some(fwd.region_feature(&fm, &BBox::new(0.0, 0.0, img_w, img_h)?)?),
    };
    let mut finals: Vec<Prediction> = Vec::new();
    for pbox in &proposals.boxes {
        let feat = fwd.region_feature(&fm, pbox)?;
        let dec = fwd.decode(feat, context)?;
        if dec.words.is_empty() {
            counts.dropped_empty_caption += 1;
            continue;
        }
        let decoded = match decode_offset(&dec.offset, pbox) {
            Ok(b) => b,
            Err(_) => {
                counts.dropped_degenerate_box += 1;
                continue;
            }
        };
        let Some(bbox) = decoded.clip(img_w, img_h) else {
            counts.dropped_degenerate_box += 1;
            continue;
        };
        finals.push(Prediction {
            bbox,
            confidence: dec.det_prob,
            caption: dec.words.iter().map(|&w| vocab.decode(w).to_string()).collect(),
        });
    }
    let scored: Vec<(BBox, f64)> = finals.iter().map(|p| (p.bbox, p.confidence)).collect();
    let kept = nms(&scored, cfg.nms_r2)?;
    let out: Vec<Prediction> = kept.into_iter().map(|i| finals[i].clone()).collect();
    counts.predictions = out.len();
    Ok((out, counts))
}

/// Evaluate a model over a corpus: per-scene inference, then the AP grid
/// pooled across scenes.
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    vocab: &Vocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Usage("evaluation corpus is empty".into()));
    }
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut counts = EvalCounts::default();
    let mut gt = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (preds, c) = predict_scene(model, scene, vocab, cfg)?;
        counts.proposals += c.proposals;
        counts.predictions += c.predictions;
        counts.dropped_empty_caption += c.dropped_empty_caption;
        counts.dropped_degenerate_box += c.dropped_degenerate_box;
        predictions.push(preds);
        gt.push(merge_ground_truth(&scene.regions, cfg.merge_iou));
    }
    let (grid, map) = ap_grid(&predictions, &gt, &cfg.iou_thresholds, &cfg.sim_thresholds)?;
    Ok(EvalReport {
        ap_grid: grid,
        map,
        iou_thresholds: cfg.iou_thresholds.clone(),
        sim_thresholds: cfg.sim_thresholds.clone(),
        counts,
        predictions,
    })
}

/// Teacher-forced next-word accuracy over GT regions (diagnostic used by
/// the convergence checks): region features come from the GT boxes.
pub fn teacher_forced_accuracy(
    model: &Model,
    scenes: &[Scene],
    vocab: &Vocabulary,
    merge_iou: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for scene in scenes {
        let mut fwd = model.fwd(false);
        let fm = fwd.backbone(&scene.image)?;
        let (img_h, img_w) = (scene.height() as f64, scene.width() as f64);
        let context = match model.cfg.fusion {
            Fusion::None => None,
            _ => Some(fwd.region_feature(&fm, &BBox::new(0.0, 0.0, img_w, img_h)?)?),
        };
        for region in merge_ground_truth(&scene.regions, merge_iou) {
            let feat = fwd.region_feature(&fm, &region.bbox)?;
            for caption in &region.captions {
                let mut words = vocab.encode_caption(caption);
                words.truncate(model.cfg.max_steps - 1);
                let out = fwd.head_forward(feat, context, &words)?;
                let v = fwd.g.value(out.word_logits);
                let vsize = model.cfg.vocab_size;
                for (t, &target) in out.word_targets.iter().enumerate() {
                    let row = &v[t * vsize..(t + 1) * vsize];
                    let argmax = (0..vsize)
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap();
                    if argmax == target {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no captions to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepEntry {
    pub proposals: usize,
    pub nms_r1: f64,
    pub nms_r2: f64,
    pub map: f64,
}

/// Grid-search the pipeline hyperparameters on a validation corpus.
/// Returns every entry plus the best (ties broken by smaller proposal
/// budget, then larger second-round NMS ratio).
pub fn sweep(
    model: &Model,
    scenes: &[Scene],
    vocab: &Vocabulary,
    base: &EvalConfig,
    proposal_grid: &[usize],
    r1_grid: &[f64],
    r2_grid: &[f64],
) -> Result<(Vec<SweepEntry>, SweepEntry)> {
    if proposal_grid.is_empty() || r1_grid.is_empty() || r2_grid.is_empty() {
        return Err(Error::Usage("sweep grids must be non-empty".into()));
    }
    let mut entries = Vec::new();
    for &k in proposal_grid {
        for &r1 in r1_grid {
            for &r2 in r2_grid {
                let cfg = EvalConfig { proposals: k, nms_r1: r1, nms_r2: r2, ..base.clone() };
                let report = evaluate(model, scenes, vocab, &cfg)?;
                entries.push(SweepEntry { proposals: k, nms_r1: r1, nms_r2: r2, map: report.map });
            }
        }
    }
    let best = *entries
        .iter()
        .max_by(|a, b| {
            (a.map, std::cmp::Reverse(a.proposals), a.nms_r2)
                .partial_cmp(&(b.map, std::cmp::Reverse(b.proposals), b.nms_r2))
                .unwrap()
        })
        .unwrap();
    Ok((entries, best))
}

/// Aligned-text sweep table plus machine-readable lines.
pub fn sweep_table(entries: &[SweepEntry], best: &SweepEntry) -> String {
    let mut out = String::from("  proposals  nms_r1  nms_r2       mAP\n");
    for e in entries {
        out.push_str(&format!(
            "  {:>9}  {:>6.2}  {:>6.2}  {:.6}\n",
            e.proposals, e.nms_r1, e.nms_r2, e.map
        ));
    }
    out.push_str(&format!(
        "best proposals={} nms_r1={} nms_r2={} map={:.9}\n",
        best.proposals, best.nms_r1, best.nms_r2, best.map
    ));
    for e in entries {
        out.push_str(&format!(
            "sweep {} {} {} {:.9}\n",
            e.proposals, e.nms_r1, e.nms_r2, e.map
        ));
    }
    out
}
