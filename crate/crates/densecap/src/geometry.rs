//! Bounding-box arithmetic: IoU, greedy NMS, anchor generation, and the
//! center/log-size offset parameterization shared by the RPN and the
//! caption-head offset predictions.
//!
//! Boxes are continuous closed regions; area = (x2-x1)*(y2-y1) with no +1
//! pixel convention.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::Domain("non-finite box coordinate".into()));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Domain(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Clip to [0,w]x[0,h]; None if nothing of positive extent remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        BBox::new(x1, y1, x2, y2).ok()
    }
}

/// Dimensionless offset of a target box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOffset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxOffset {
    pub const ZERO: BoxOffset = BoxOffset { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxOffset { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }
}

/// Anchor layout: every scale crossed with every aspect ratio at each
/// feature-map cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSpec {
    /// box side lengths (sqrt of area) in input pixels
    pub scales: Vec<f64>,
    /// w/h ratios
    pub aspect_ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Intersection-over-union in [0,1]; symmetric.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy NMS: repeatedly keep the highest-score box and drop boxes with
/// IoU strictly greater than `iou_threshold` against it. Ties on score are
/// broken by lower original index. Returns kept indices ordered by
/// descending score.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config(format!(
            "nms threshold {iou_threshold} outside [0,1]"
        )));
    }
    if boxes.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::Domain("non-finite nms score".into()));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort keeps lower original index first on ties
    order.sort_by(|&a, &b| boxes[b].1.partial_cmp(&boxes[a].1).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i].0, &boxes[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// tx=(cx-cxa)/wa, ty=(cy-cya)/ha, tw=log(w/wa), th=log(h/ha).
pub fn encode_offset(target: &BBox, anchor: &BBox) -> BoxOffset {
    let (cx, cy) = target.center();
    let (cxa, cya) = anchor.center();
    BoxOffset {
        tx: (cx - cxa) / anchor.width(),
        ty: (cy - cya) / anchor.height(),
        tw: (target.width() / anchor.width()).ln(),
        th: (target.height() / anchor.height()).ln(),
    }
}

/// Exact inverse of [`encode_offset`]; the caller clips to image bounds.
pub fn decode_offset(offset: &BoxOffset, anchor: &BBox) -> Result<BBox> {
    let (cxa, cya) = anchor.center();
    let cx = cxa + offset.tx * anchor.width();
    let cy = cya + offset.ty * anchor.height();
    let w = anchor.width() * offset.tw.exp();
    let h = anchor.height() * offset.th.exp();
    BBox::new(cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5)
}

/// All anchors for a feature map, cell-major (y, then x), then scale-major
/// over aspect ratios within the cell. Centers sit at (i+0.5)*downsample.
/// Anchors may extend beyond image bounds.
pub fn generate_anchors(
    spec: &AnchorSpec,
    feat_h: usize,
    feat_w: usize,
    downsample: usize,
) -> Vec<BBox> {
    assert!(downsample > 0);
    let mut out = Vec::with_capacity(feat_h * feat_w * spec.anchors_per_cell());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * downsample as f64;
            let cy = (y as f64 + 0.5) * downsample as f64;
            for &s in &spec.scales {
                for &r in &spec.aspect_ratios {
                    // area s^2, w/h = r  =>  w = s*sqrt(r), h = s/sqrt(r)
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    out.push(BBox {
                        x1: cx - w * 0.5,
                        y1: cy - h * 0.5,
                        x2: cx + w * 0.5,
                        y2: cy + h * 0.5,
                    });
                }
            }
        }
    }
    out
}

/// Collapse connected components under the IoU > merge_iou relation into a
/// single group. Returns, per component, the member indices.
pub fn merge_groups(boxes: &[BBox], merge_iou: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            if iou(&boxes[i], &boxes[j]) > merge_iou {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_to_group: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_to_group[r] {
            Some(gi) => groups[gi].push(i),
            None => {
                root_to_group[r] = Some(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}
