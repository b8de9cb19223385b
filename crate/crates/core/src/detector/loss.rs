use serde::{Deserialize, Serialize};

use super::{hungarian_match, match_cost_matrix, Assignment, DecoderOutput, Result};
use crate::boxes::BBox;
use crate::tensor::{Graph, Var};

/// Loss weights and focal parameters. Focal `gamma` is an integer power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2,
        }
    }
}

/// Scalar focal loss of one probability.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: u32) -> f64 {
    if positive {
        -alpha * (1.0 - p).powi(gamma as i32) * p.ln()
    } else {
        -(1.0 - alpha) * p.powi(gamma as i32) * (1.0 - p).ln()
    }
}

/// Unweighted, unnormalized components of one detection loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

fn pow_int(g: &mut Graph, x: Var, n: u32) -> Result<Var> {
    if n == 0 {
        let shape = g.shape(x).to_vec();
        let ones = vec![1.0; g.data(x).len()];
        return Ok(g.constant(shape, ones)?);
    }
    let mut acc = x;
    for _ in 1..n {
        acc = g.mul(acc, x)?;
    }
    Ok(acc)
}

/// Sum of focal terms over a logit matrix with 0/1 `targets` of the same shape.
fn focal_sum(g: &mut Graph, logits: Var, targets: &[f64], w: &LossWeights) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let p = g.sigmoid(logits);
    let neg_logits = g.scale(logits, -1.0);
    let q = g.sigmoid(neg_logits);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let qg = pow_int(g, q, w.gamma)?;
    let pg = pow_int(g, p, w.gamma)?;
    let pos = g.mul(qg, log_p)?;
    let pos = g.scale(pos, -w.alpha);
    let neg = g.mul(pg, log_q)?;
    let neg = g.scale(neg, -(1.0 - w.alpha));
    let t = g.constant(shape.clone(), targets.to_vec())?;
    let not_t = g.constant(shape, targets.iter().map(|v| 1.0 - v).collect())?;
    let a = g.mul(t, pos)?;
    let b = g.mul(not_t, neg)?;
    let s = g.add(a, b)?;
    Ok(g.sum(s))
}

fn column(g: &mut Graph, x: Var, c: usize) -> Result<Var> {
    Ok(g.slice(x, 1, c, c + 1)?)
}

/// Corners of `n x 4` center-format boxes as four `n x 1` columns.
fn corners(g: &mut Graph, b: Var) -> Result<[Var; 4]> {
    let cx = column(g, b, 0)?;
    let cy = column(g, b, 1)?;
    let hw = column(g, b, 2)?;
    let hw = g.scale(hw, 0.5);
    let hh = column(g, b, 3)?;
    let hh = g.scale(hh, 0.5);
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// Per-row GIoU of two `n x 4` center-format box sets, as an `n x 1` var.
pub fn giou_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let [ax1, ay1, ax2, ay2] = corners(g, a)?;
    let [bx1, by1, bx2, by2] = corners(g, b)?;
    let ix1 = g.maximum(ax1, bx1)?;
    let iy1 = g.maximum(ay1, by1)?;
    let ix2 = g.minimum(ax2, bx2)?;
    let iy2 = g.minimum(ay2, by2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let aw = g.sub(ax2, ax1)?;
    let ah = g.sub(ay2, ay1)?;
    let area_a = g.mul(aw, ah)?;
    let bw = g.sub(bx2, bx1)?;
    let bh = g.sub(by2, by1)?;
    let area_b = g.mul(bw, bh)?;
    let union = g.add(area_a, area_b)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.minimum(ax1, bx1)?;
    let ey1 = g.minimum(ay1, by1)?;
    let ex2 = g.maximum(ax2, bx2)?;
    let ey2 = g.maximum(ay2, by2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;
    let gap = g.sub(enclosing, union)?;
    let frac = g.div(gap, enclosing)?;
    Ok(g.sub(iou, frac)?)
}

/// `sum_i |a_i - b_i|` over two equally shaped box sets.
pub fn l1_loss_terms(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    Ok(g.sum(d))
}

/// `sum_i (1 - GIoU_i)` over two equally shaped box sets.
pub fn giou_loss_terms(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let gi = giou_rows(g, a, b)?;
    let s = g.sum(gi);
    let n = g.shape(a)[0] as f64;
    let neg = g.scale(s, -1.0);
    Ok(g.offset(neg, n)?)
}

fn boxes_var(g: &mut Graph, boxes: &[BBox]) -> Result<Var> {
    let data = boxes.iter().flat_map(|b| b.as_array()).collect();
    Ok(g.constant([boxes.len(), 4], data)?)
}

/// Weighted detection loss normalized by the number of ground truths:
/// focal over every (query, class) logit, plus L1 and GIoU over matched pairs.
pub fn detection_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let shape = g.shape(out.logits).to_vec();
    let (nq, nc) = (shape[0], shape[1]);
    let mut targets = vec![0.0; nq * nc];
    for &(pred, gt) in &assignment.pairs {
        targets[pred * nc + gt_classes[gt]] = 1.0;
    }
    let focal = focal_sum(g, out.logits, &targets, w)?;
    let mut breakdown = LossBreakdown {
        focal: g.item(focal),
        ..Default::default()
    };
    let mut total = g.scale(focal, w.cls);
    if !assignment.pairs.is_empty() {
        let nm = assignment.pairs.len();
        let mut sel = vec![0.0; nm * nq];
        for (r, &(pred, _)) in assignment.pairs.iter().enumerate() {
            sel[r * nq + pred] = 1.0;
        }
        let sel = g.constant([nm, nq], sel)?;
        let pred = g.matmul(sel, out.boxes)?;
        let targets: Vec<BBox> = assignment.pairs.iter().map(|&(_, gt)| gt_boxes[gt]).collect();
        let tgt = boxes_var(g, &targets)?;
        let l1 = l1_loss_terms(g, pred, tgt)?;
        let gl = giou_loss_terms(g, pred, tgt)?;
        breakdown.l1 = g.item(l1);
        breakdown.giou = g.item(gl);
        let l1w = g.scale(l1, w.l1);
        let glw = g.scale(gl, w.giou);
        total = g.add(total, l1w)?;
        total = g.add(total, glw)?;
    }
    let total = g.scale(total, 1.0 / gt_boxes.len().max(1) as f64);
    breakdown.total = g.item(total);
    Ok((total, breakdown))
}

/// Match predictions to ground truth by minimum cost, then evaluate
/// [`detection_loss`] under that assignment.
pub fn matched_detection_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown, Assignment)> {
    let boxes = g.data(out.boxes);
    let pred_boxes: Vec<BBox> = boxes
        .chunks(4)
        .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
        .collect();
    let nc = g.shape(out.logits)[1];
    let probs: Vec<Vec<f64>> = g
        .data(out.logits)
        .chunks(nc)
        .map(|row| row.iter().map(|&l| crate::tensor::sigmoid(l)).collect())
        .collect();
    let cost = match_cost_matrix(&pred_boxes, &probs, gt_boxes, gt_classes, w);
    let assignment = hungarian_match(&cost)?;
    let (loss, breakdown) = detection_loss(g, out, gt_boxes, gt_classes, &assignment, w)?;
    Ok((loss, breakdown, assignment))
}
