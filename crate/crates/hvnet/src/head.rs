//! Multi-class anchor detection head: anchor generation over class feature
//! maps, RIoU-driven target assignment with corner-offset regression,
//! focal/smooth-L1 losses with analytic gradients, box decoding with
//! per-class rotated NMS, and AP over 40 recall positions.

use crate::error::{HvError, Result};
use crate::geometry::{fit_box_from_quad, riou, rotated_nms, Box3D, RotatedBoxBEV};
use crate::tensor::{conv2d_backward, conv2d_forward, Conv2dParams, DenseGrid};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probability clamp keeping focal loss logs finite.
const PROB_EPS: f64 = 1e-7;

/// Classification bias prior: an untrained head predicts p ~ 0.01, which
/// keeps focal gradients alive without flooding early decoding.
const CLS_BIAS_PRIOR: f64 = 0.01;

/// Per-class anchor and matching configuration. Sizes are (w, l, h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub sizes: Vec<[f64; 3]>,
    pub orientations: Vec<f64>,
    pub z_center: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub eval_iou: f64,
    pub focal_alpha: f64,
}

impl ClassSpec {
    pub fn anchors_per_pixel(&self) -> usize {
        self.sizes.len() * self.orientations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.orientations.is_empty() {
            return Err(HvError::Config(format!(
                "class {} needs sizes and orientations",
                self.name
            )));
        }
        if !(self.pos_iou > self.neg_iou) {
            return Err(HvError::Config(format!(
                "class {}: positive threshold {} must exceed negative {}",
                self.name, self.pos_iou, self.neg_iou
            )));
        }
        Ok(())
    }
}

/// Pixel-to-world mapping of one class feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapGeometry {
    pub rows: usize,
    pub cols: usize,
    pub meters_per_pixel: f64,
    /// World coordinates of the map corner (scene minimum x, y).
    pub origin: (f64, f64),
}

/// One anchor set per pixel center, sizes-major then orientations, pixels
/// in row-major order. The flat anchor index is
/// `(row * cols + col) * anchors_per_pixel + size_idx * n_orient + orient_idx`.
pub fn generate_anchors(geom: &MapGeometry, class: &ClassSpec) -> Vec<Box3D> {
    let mut anchors =
        Vec::with_capacity(geom.rows * geom.cols * class.anchors_per_pixel());
    for row in 0..geom.rows {
        for col in 0..geom.cols {
            let cx = geom.origin.0 + (col as f64 + 0.5) * geom.meters_per_pixel;
            let cy = geom.origin.1 + (row as f64 + 0.5) * geom.meters_per_pixel;
            for size in &class.sizes {
                for &yaw in &class.orientations {
                    anchors.push(Box3D::new(
                        RotatedBoxBEV::new(cx, cy, size[1], size[0], yaw),
                        class.z_center,
                        size[2],
                    ));
                }
            }
        }
    }
    anchors
}

/// Anchor role after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    /// Matched ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Matching result plus regression targets (meaningful for positives).
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub labels: Vec<AnchorLabel>,
    pub corner_targets: Vec<[f64; 8]>,
    pub vertical_targets: Vec<[f64; 2]>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

/// Corner offsets gt - anchor, with the gt corner correspondence chosen
/// among the 4 cyclic shifts to minimize the total squared offset.
pub fn corner_offsets(anchor: &RotatedBoxBEV, gt: &RotatedBoxBEV) -> [f64; 8] {
    let ac = anchor.corners();
    let gc = gt.corners();
    let mut best_k = 0;
    let mut best_cost = f64::INFINITY;
    for k in 0..4 {
        let mut cost = 0.0;
        for j in 0..4 {
            let g = gc[(j + k) % 4];
            let dx = g.0 - ac[j].0;
            let dy = g.1 - ac[j].1;
            cost += dx * dx + dy * dy;
        }
        if cost < best_cost {
            best_cost = cost;
            best_k = k;
        }
    }
    let mut out = [0.0; 8];
    for j in 0..4 {
        let g = gc[(j + best_k) % 4];
        out[2 * j] = g.0 - ac[j].0;
        out[2 * j + 1] = g.1 - ac[j].1;
    }
    out
}

/// Fast zero test before exact RIoU: disjoint circumscribed circles.
fn definitely_disjoint(a: &RotatedBoxBEV, b: &RotatedBoxBEV) -> bool {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = 0.5 * (a.length * a.length + a.width * a.width).sqrt();
    let rb = 0.5 * (b.length * b.length + b.width * b.width).sqrt();
    dx * dx + dy * dy > (ra + rb) * (ra + rb)
}

/// Match anchors of one class to its ground-truth boxes: positive above
/// `pos_iou` (plus, optionally, the best anchor of every gt), negative
/// below `neg_iou`, ignored in between.
pub fn assign_targets(
    anchors: &[Box3D],
    gts: &[Box3D],
    pos_iou: f64,
    neg_iou: f64,
    force_best_per_gt: bool,
) -> Result<TargetAssignment> {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut best_iou = vec![0.0f64; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let iou = if definitely_disjoint(&anchor.bev, &gt.bev) {
                0.0
            } else {
                riou(&anchor.bev, &gt.bev)?
            };
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, ai);
            }
        }
        if best_iou[ai] > pos_iou {
            labels[ai] = AnchorLabel::Positive(best_gt[ai]);
        } else if best_iou[ai] < neg_iou {
            labels[ai] = AnchorLabel::Negative;
        } else {
            labels[ai] = AnchorLabel::Ignore;
        }
    }

    if force_best_per_gt {
        for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
            if ai != usize::MAX && iou > 1e-6 {
                match labels[ai] {
                    AnchorLabel::Positive(prev) if best_iou[ai] > iou && prev != gi => {}
                    _ => labels[ai] = AnchorLabel::Positive(gi),
                }
            }
        }
    }

    let mut corner_targets = vec![[0.0; 8]; n];
    let mut vertical_targets = vec![[0.0; 2]; n];
    for ai in 0..n {
        if let AnchorLabel::Positive(gi) = labels[ai] {
            let gt = &gts[gi];
            corner_targets[ai] = corner_offsets(&anchors[ai].bev, &gt.bev);
            vertical_targets[ai] = [
                gt.z_center - anchors[ai].z_center,
                gt.height - anchors[ai].height,
            ];
        }
    }
    Ok(TargetAssignment {
        labels,
        corner_targets,
        vertical_targets,
    })
}

/// The three parallel 3x3 conv branches of one class head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHeadParams {
    pub cls: Conv2dParams,
    pub corners: Conv2dParams,
    pub vertical: Conv2dParams,
}

impl ClassHeadParams {
    pub fn init<R: Rng>(in_channels: usize, anchors_per_pixel: usize, rng: &mut R) -> Self {
        let mut cls = Conv2dParams::init(anchors_per_pixel, in_channels, (3, 3), rng)
            .with_padding(1);
        let prior = -((1.0 - CLS_BIAS_PRIOR) / CLS_BIAS_PRIOR).ln();
        for b in cls.bias.data_mut() {
            *b = prior as f32 as f64;
        }
        ClassHeadParams {
            cls,
            corners: Conv2dParams::init(anchors_per_pixel * 8, in_channels, (3, 3), rng)
                .with_padding(1),
            vertical: Conv2dParams::init(anchors_per_pixel * 2, in_channels, (3, 3), rng)
                .with_padding(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &Conv2dParams| Conv2dParams {
            weight: DenseGrid::zeros(p.weight.shape()),
            bias: DenseGrid::zeros(p.bias.shape()),
            stride: p.stride,
            padding: p.padding,
        };
        ClassHeadParams {
            cls: z(&self.cls),
            corners: z(&self.corners),
            vertical: z(&self.vertical),
        }
    }
}

/// Raw per-class head maps: classification logits, corner offsets and
/// vertical regression, all `[channels x rows x cols]`.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub cls: DenseGrid,
    pub corners: DenseGrid,
    pub vertical: DenseGrid,
}

impl HeadOutput {
    pub fn zeros_like(&self) -> Self {
        HeadOutput {
            cls: DenseGrid::zeros(self.cls.shape()),
            corners: DenseGrid::zeros(self.corners.shape()),
            vertical: DenseGrid::zeros(self.vertical.shape()),
        }
    }
}

/// Run the three branches over one class feature map (no activation).
pub fn head_forward(feature_map: &DenseGrid, params: &ClassHeadParams) -> Result<HeadOutput> {
    Ok(HeadOutput {
        cls: conv2d_forward(feature_map, &params.cls, false)?,
        corners: conv2d_forward(feature_map, &params.corners, false)?,
        vertical: conv2d_forward(feature_map, &params.vertical, false)?,
    })
}

/// Backward of [`head_forward`]: parameter grads plus feature-map grad.
pub fn head_backward(
    feature_map: &DenseGrid,
    params: &ClassHeadParams,
    outputs: &HeadOutput,
    upstream: &HeadOutput,
) -> Result<(ClassHeadParams, DenseGrid)> {
    let mut grads = params.zeros_like();
    let mut d_map = DenseGrid::zeros(feature_map.shape());
    for (p, g, y, u) in [
        (&params.cls, &mut grads.cls, &outputs.cls, &upstream.cls),
        (
            &params.corners,
            &mut grads.corners,
            &outputs.corners,
            &upstream.corners,
        ),
        (
            &params.vertical,
            &mut grads.vertical,
            &outputs.vertical,
            &upstream.vertical,
        ),
    ] {
        let gg = conv2d_backward(feature_map, p, false, y, u)?;
        g.weight.add_assign(&gg.weight)?;
        g.bias.add_assign(&gg.bias)?;
        d_map.add_assign(&gg.input)?;
    }
    Ok((grads, d_map))
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal loss of one anchor given its (clamped) predicted probability.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d focal / d p, zero where the clamp saturates.
pub fn focal_loss_grad(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    if positive {
        -alpha * ((1.0 - p).powf(gamma) / p - gamma * (1.0 - p).powf(gamma - 1.0) * p.ln())
    } else {
        -(1.0 - alpha)
            * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Sum of smooth-L1 over the 8 corner-offset components.
pub fn corner_loss(pred: &[f64; 8], target: &[f64; 8]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

/// Loss weights; focal alpha comes per class from [`ClassSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub lambda_vertical: f64,
}

/// Per-term breakdown; each term already carries its weight and the
/// 1/max(N_pos, 1) normalization, so `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub vertical: f64,
    pub num_positive: usize,
}

struct AnchorRef {
    anchor_idx: usize,
    row: usize,
    col: usize,
    slot: usize,
}

fn anchor_iter(rows: usize, cols: usize, per_pixel: usize) -> impl Iterator<Item = AnchorRef> {
    (0..rows).flat_map(move |row| {
        (0..cols).flat_map(move |col| {
            (0..per_pixel).map(move |slot| AnchorRef {
                anchor_idx: (row * cols + col) * per_pixel + slot,
                row,
                col,
                slot,
            })
        })
    })
}

fn loss_impl(
    outputs: &[HeadOutput],
    assignments: &[TargetAssignment],
    alphas: &[f64],
    cfg: &LossConfig,
    mut grads: Option<&mut Vec<HeadOutput>>,
) -> Result<LossBreakdown> {
    if outputs.len() != assignments.len() || outputs.len() != alphas.len() {
        return Err(HvError::dim(
            "total_loss",
            format!(
                "{} outputs, {} assignments, {} alphas",
                outputs.len(),
                assignments.len(),
                alphas.len()
            ),
        ));
    }
    let num_positive: usize = assignments.iter().map(|a| a.num_positive()).sum();
    let norm = 1.0 / num_positive.max(1) as f64;

    let mut loc_raw = 0.0;
    let mut cls_raw = 0.0;
    let mut vert_raw = 0.0;
    for (ci, out) in outputs.iter().enumerate() {
        let assign = &assignments[ci];
        let alpha = alphas[ci];
        let (per_pixel, rows, cols) = (
            out.cls.shape()[0],
            out.cls.shape()[1],
            out.cls.shape()[2],
        );
        if assign.labels.len() != per_pixel * rows * cols {
            return Err(HvError::dim(
                "total_loss",
                format!(
                    "class {ci}: {} anchors vs {} head cells",
                    assign.labels.len(),
                    per_pixel * rows * cols
                ),
            ));
        }
        for a in anchor_iter(rows, cols, per_pixel) {
            let label = assign.labels[a.anchor_idx];
            if matches!(label, AnchorLabel::Ignore) {
                continue;
            }
            let positive = matches!(label, AnchorLabel::Positive(_));
            let z = out.cls.at3(a.slot, a.row, a.col);
            let p = sigmoid(z);
            cls_raw += focal_loss(p, positive, alpha, cfg.gamma);
            if let Some(g) = grads.as_deref_mut() {
                let dp = focal_loss_grad(clamp_prob(p), positive, alpha, cfg.gamma);
                let dz = dp * p * (1.0 - p);
                let idx = (a.slot * rows + a.row) * cols + a.col;
                g[ci].cls.data_mut()[idx] += cfg.lambda_cls * norm * dz;
            }
            if positive {
                for k in 0..8 {
                    let pred = out.corners.at3(a.slot * 8 + k, a.row, a.col);
                    let d = pred - assign.corner_targets[a.anchor_idx][k];
                    loc_raw += smooth_l1(d);
                    if let Some(g) = grads.as_deref_mut() {
                        let idx = ((a.slot * 8 + k) * rows + a.row) * cols + a.col;
                        g[ci].corners.data_mut()[idx] +=
                            cfg.lambda_loc * norm * smooth_l1_grad(d);
                    }
                }
                for k in 0..2 {
                    let pred = out.vertical.at3(a.slot * 2 + k, a.row, a.col);
                    let d = pred - assign.vertical_targets[a.anchor_idx][k];
                    vert_raw += smooth_l1(d);
                    if let Some(g) = grads.as_deref_mut() {
                        let idx = ((a.slot * 2 + k) * rows + a.row) * cols + a.col;
                        g[ci].vertical.data_mut()[idx] +=
                            cfg.lambda_vertical * norm * smooth_l1_grad(d);
                    }
                }
            }
        }
    }

    let loc = cfg.lambda_loc * loc_raw * norm;
    let cls = cfg.lambda_cls * cls_raw * norm;
    let vertical = cfg.lambda_vertical * vert_raw * norm;
    Ok(LossBreakdown {
        total: loc + cls + vertical,
        loc,
        cls,
        vertical,
        num_positive,
    })
}

/// Total loss `(lambda_loc L_loc + lambda_cls L_cls + lambda_h L_h) / max(N_pos, 1)`.
pub fn total_loss(
    outputs: &[HeadOutput],
    assignments: &[TargetAssignment],
    alphas: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    loss_impl(outputs, assignments, alphas, cfg, None)
}

/// Total loss plus gradients w.r.t. every raw head output.
pub fn total_loss_backward(
    outputs: &[HeadOutput],
    assignments: &[TargetAssignment],
    alphas: &[f64],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<HeadOutput>)> {
    let mut grads: Vec<HeadOutput> = outputs.iter().map(|o| o.zeros_like()).collect();
    let breakdown = loss_impl(outputs, assignments, alphas, cfg, Some(&mut grads))?;
    Ok((breakdown, grads))
}

/// A scored, class-labeled box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_idx: usize,
    pub box3: Box3D,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeStats {
    pub dropped_degenerate: usize,
}

/// Decode head outputs against their anchors: corner offsets move anchor
/// corners, the quad refits to a box, vertical offsets shift z and height.
/// Score-filtered candidates then pass per-class rotated NMS.
pub fn decode_detections(
    anchors_per_class: &[Vec<Box3D>],
    outputs: &[HeadOutput],
    classes: &[ClassSpec],
    score_threshold: f64,
) -> Result<(Vec<Detection>, DecodeStats)> {
    let mut detections = Vec::new();
    let mut stats = DecodeStats::default();
    for (ci, out) in outputs.iter().enumerate() {
        let class = &classes[ci];
        let anchors = &anchors_per_class[ci];
        let (per_pixel, rows, cols) = (
            out.cls.shape()[0],
            out.cls.shape()[1],
            out.cls.shape()[2],
        );
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        let mut cand_vert = Vec::new();
        for a in anchor_iter(rows, cols, per_pixel) {
            let score = sigmoid(out.cls.at3(a.slot, a.row, a.col));
            if score < score_threshold {
                continue;
            }
            let anchor = &anchors[a.anchor_idx];
            let ac = anchor.bev.corners();
            let mut quad = [(0.0, 0.0); 4];
            for j in 0..4 {
                quad[j] = (
                    ac[j].0 + out.corners.at3(a.slot * 8 + 2 * j, a.row, a.col),
                    ac[j].1 + out.corners.at3(a.slot * 8 + 2 * j + 1, a.row, a.col),
                );
            }
            let bev = match fit_box_from_quad(&quad) {
                Ok(b) => b,
                Err(_) => {
                    stats.dropped_degenerate += 1;
                    continue;
                }
            };
            let z = anchor.z_center + out.vertical.at3(a.slot * 2, a.row, a.col);
            let h = anchor.height + out.vertical.at3(a.slot * 2 + 1, a.row, a.col);
            if h <= 0.0 {
                stats.dropped_degenerate += 1;
                continue;
            }
            cand_boxes.push(bev);
            cand_scores.push(score);
            cand_vert.push((z, h));
        }
        let kept = rotated_nms(&cand_boxes, &cand_scores, class.nms_iou, score_threshold)?;
        for k in kept {
            detections.push(Detection {
                class_idx: ci,
                box3: Box3D::new(cand_boxes[k], cand_vert[k].0, cand_vert[k].1),
                score: cand_scores[k],
            });
        }
    }
    Ok((detections, stats))
}

/// Average precision over 40 recall positions: detections match unmatched
/// ground truth greedily in descending score order at the given RIoU
/// threshold; sampled precisions are right-interpolated maxima.
pub fn ap_40(
    detections: &[Vec<(RotatedBoxBEV, f64)>],
    ground_truth: &[Vec<RotatedBoxBEV>],
    iou_threshold: f64,
) -> Result<f64> {
    if detections.len() != ground_truth.len() {
        return Err(HvError::dim(
            "ap_40",
            format!(
                "{} detection scenes vs {} gt scenes",
                detections.len(),
                ground_truth.len()
            ),
        ));
    }
    let num_gt: usize = ground_truth.iter().map(|g| g.len()).sum();
    if num_gt == 0 {
        return Err(HvError::Domain(
            "ap_40 undefined with zero ground-truth boxes".into(),
        ));
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, dets) in detections.iter().enumerate() {
        for di in 0..dets.len() {
            order.push((si, di));
        }
    }
    order.sort_by(|&(sa, da), &(sb, db)| {
        detections[sb][db]
            .1
            .partial_cmp(&detections[sa][da].1)
            .unwrap()
            .then(sa.cmp(&sb))
            .then(da.cmp(&db))
    });

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (si, di) in order {
        let det = &detections[si][di].0;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth[si].iter().enumerate() {
            if matched[si][gi] {
                continue;
            }
            let iou = riou(det, gt)?;
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut ap = 0.0;
    for j in 1..=40 {
        let level = j as f64 / 40.0;
        let best = curve
            .iter()
            .filter(|(r, _)| *r >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += best;
    }
    Ok(ap / 40.0)
}
