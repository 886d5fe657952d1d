//! Stage-one plumbing around the convolutional backbone: anchor/proposal
//! handling, RPN training-box sampling, and input resizing. The trainable
//! parameters and forward passes live in [`crate::model`].

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{decode_offset, iou, nms, BBox, BoxOffset};
use crate::tensor::Tensor;

/// Proposals decoded from RPN outputs, sorted by descending objectness.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// index of the source anchor per proposal
    pub anchors: Vec<usize>,
}

/// Anchor labels for one RPN training pass.
#[derive(Debug, Clone, Default)]
pub struct TrainingSample {
    /// (anchor index, matched gt index); offset target is encode(gt, anchor)
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
    /// no anchor fell below the negative threshold (degenerate scene)
    pub degenerate: bool,
}

/// Label anchors against ground truth and subsample to at most `n` with at
/// most n/2 positives. Positive: IoU >= pos_iou with some GT, or argmax
/// anchor for a GT. Negative: max IoU < neg_iou.
pub fn sample_training_boxes(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    n: usize,
    pos_iou: f64,
    neg_iou: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    if gt_boxes.is_empty() {
        return Err(Error::Usage("sample_training_boxes needs at least one GT box".into()));
    }
    let mut best_gt = vec![(0usize, 0.0f64); anchors.len()]; // (gt idx, iou)
    let mut gt_argmax = vec![(0usize, 0.0f64); gt_boxes.len()]; // (anchor idx, iou)
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(a, g);
            if v > best_gt[ai].1 {
                best_gt[ai] = (gi, v);
            }
            if v > gt_argmax[gi].1 {
                gt_argmax[gi] = (ai, v);
            }
        }
    }
    let mut is_pos = vec![false; anchors.len()];
    for (ai, &(_, v)) in best_gt.iter().enumerate() {
        if v >= pos_iou {
            is_pos[ai] = true;
        }
    }
    // force each GT's argmax anchor positive, but only when that GT is also
    // the anchor's best match — the pairing below always uses best_gt, and a
    // forced anchor regressing toward a different GT would corrupt targets
    for (gi, &(ai, v)) in gt_argmax.iter().enumerate() {
        if v > 0.0 && best_gt[ai].0 == gi {
            is_pos[ai] = true;
        }
    }
    let mut positives: Vec<(usize, usize)> = (0..anchors.len())
        .filter(|&ai| is_pos[ai])
        .map(|ai| (ai, best_gt[ai].0))
        .collect();
    let mut negatives: Vec<usize> = (0..anchors.len())
        .filter(|&ai| !is_pos[ai] && best_gt[ai].1 < neg_iou)
        .collect();
    let degenerate = negatives.is_empty();

    positives.shuffle(rng);
    positives.truncate(n / 2);
    negatives.shuffle(rng);
    negatives.truncate(n - positives.len());
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(TrainingSample { positives, negatives, degenerate })
}

/// Decode all anchor offsets, clip to the image, drop degenerate boxes,
/// apply NMS at `nms_r1`, keep the top-k by objectness.
pub fn propose(
    fg_scores: &[f64],
    offsets: &[f64], // flat [#anchors, 4]
    anchors: &[BBox],
    img_w: f64,
    img_h: f64,
    k: usize,
    nms_r1: f64,
) -> Result<ProposalSet> {
    if k == 0 {
        return Err(Error::Config("proposal budget k must be >= 1".into()));
    }
    let mut candidates: Vec<(BBox, f64, usize)> = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        let off = BoxOffset::from_slice(&offsets[ai * 4..ai * 4 + 4]);
        let Ok(decoded) = decode_offset(&off, anchor) else { continue };
        let Some(clipped) = decoded.clip(img_w, img_h) else { continue };
        candidates.push((clipped, fg_scores[ai], ai));
    }
    let scored: Vec<(BBox, f64)> = candidates.iter().map(|c| (c.0, c.1)).collect();
    let kept = nms(&scored, nms_r1)?;
    let kept = &kept[..kept.len().min(k)];
    Ok(ProposalSet {
        boxes: kept.iter().map(|&i| candidates[i].0).collect(),
        scores: kept.iter().map(|&i| candidates[i].1).collect(),
        anchors: kept.iter().map(|&i| candidates[i].2).collect(),
    })
}

/// Softmax foreground probability per anchor from flat [N, 2]
/// background/foreground logits.
pub fn foreground_probs(cls_values: &[f64]) -> Vec<f64> {
    cls_values
        .chunks_exact(2)
        .map(|p| {
            let m = p[0].max(p[1]);
            let (eb, ef) = ((p[0] - m).exp(), (p[1] - m).exp());
            ef / (eb + ef)
        })
        .collect()
}

/// Match second-stage proposals to ground truth with the same IoU rule as
/// RPN sampling. Returns (proposal idx, gt idx) positives and negative idxs.
pub fn match_proposals(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let (mut best_gi, mut best) = (0usize, 0.0f64);
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(p, g);
            if v > best {
                best = v;
                best_gi = gi;
            }
        }
        if best >= pos_iou {
            pos.push((pi, best_gi));
        } else if best < neg_iou {
            neg.push(pi);
        }
    }
    (pos, neg)
}

/// Bilinear resize so the longer side equals `target`, then zero-pad to the
/// next multiple of 16. Returns the resized tensor and the scale factor
/// applied to coordinates.
pub fn resize_longer_side(image: &Tensor, target: usize) -> Result<(Tensor, f64)> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::Shape(format!("resize wants [3,H,W], got {:?}", image.shape)));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    if h < 16 || w < 16 {
        return Err(Error::Usage("image smaller than 16x16".into()));
    }
    let longer = h.max(w);
    let scale = target as f64 / longer as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let ph = nh.div_ceil(16) * 16;
    let pw = nw.div_ceil(16) * 16;
    let mut out = Tensor::zeros(&[3, ph, pw]);
    for c in 0..3 {
        for y in 0..nh {
            let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..nw {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let at = |yy: usize, xx: usize| image.data[(c * h + yy) * w + xx];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out.data[(c * ph + y) * pw + x] = v;
            }
        }
    }
    Ok((out, scale))
}
