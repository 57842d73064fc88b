//! Bipartite matching between predictions and ground truth, the matching
//! cost, and the supervised set-prediction loss with deep supervision.
//!
//! All functions here are pure; gradients never flow through the discrete
//! assignment itself, only through the loss terms built on a fixed
//! assignment.

use autodiff::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::{DetectionSet, PredictionNodes};

/// Annotated objects of one scene. Class ids lie in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub classes: Vec<usize>,
    /// (cx, cy, w, h), all in [0, 1].
    pub boxes: Vec<[f64; 4]>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// One-to-one query-to-object assignment. Queries absent from `pairs`
/// are implicitly matched to the background class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (query_index, gt_index) pairs, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Total cost of this assignment under a cost matrix.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost[q][t]).sum()
    }
}

/// Weights of the matching cost and the supervised loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    /// Relative weight of background-class targets in the classification
    /// term.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class_weight: 1.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            background_weight: 0.1,
        }
    }
}

/// Generalized intersection-over-union of two (cx, cy, w, h) boxes:
/// IoU minus the fraction of the enclosing box not covered by the union.
/// Lies in (-1, 1], with 1 for identical boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64, CoreError> {
    for bx in [a, b] {
        if bx[2] <= 0.0 || bx[3] <= 0.0 {
            return Err(CoreError::DegenerateBox { w: bx[2], h: bx[3] });
        }
    }
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclosing = ew * eh;
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Plain intersection-over-union, used by the evaluator.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn corners(b: [f64; 4]) -> (f64, f64, f64, f64) {
    (
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    )
}

/// Pairwise matching cost between M predictions and the ground truth:
/// `w_cls * (-p[class]) + w_l1 * |box - gt|_1 + w_giou * (-giou)`.
pub fn matching_cost(
    pred: &DetectionSet,
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<Vec<Vec<f64>>, CoreError> {
    let m = pred.num_instances();
    let mut cost = vec![vec![0.0; gt.len()]; m];
    for (q, row) in cost.iter_mut().enumerate() {
        let probs = pred.class_row(q);
        let pbox = pred.box_row(q);
        for (t, cell) in row.iter_mut().enumerate() {
            let l1: f64 = pbox
                .iter()
                .zip(&gt.boxes[t])
                .map(|(a, b)| (a - b).abs())
                .sum();
            *cell = weights.class_weight * (-probs[gt.classes[t]])
                + weights.l1_weight * l1
                + weights.giou_weight * (-giou(pbox, gt.boxes[t])?);
        }
    }
    Ok(cost)
}

/// Minimum-cost one-to-one assignment of every column (object) to a
/// distinct row (query), for a rows >= columns cost matrix.
///
/// Kuhn-Munkres with potentials and augmenting paths; strict comparisons
/// make index scans deterministic, so the lowest row index wins among
/// equal-cost optima.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, CoreError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cols == 0 {
        return Ok(Assignment { pairs: Vec::new() });
    }
    if rows < cols {
        return Err(CoreError::AssignmentShape { rows, cols });
    }

    // Solve on the transposed (cols x rows) problem so every column gets
    // assigned. 1-based arrays with a virtual 0 slot, following the
    // classic potential formulation.
    let n = cols;
    let m = rows;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut assigned_row: Vec<usize> = vec![0; m + 1]; // row j (1-based) -> col
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[j - 1][i0 - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (j - 1, assigned_row[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, t)| t);
    Ok(Assignment { pairs })
}

/// Optimal matchings for each decoder layer independently.
pub fn match_layers(
    g: &Graph,
    layer_preds: &[PredictionNodes],
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<Vec<Assignment>, CoreError> {
    layer_preds
        .iter()
        .map(|p| {
            let set = p.detach(g);
            if gt.len() > set.num_instances() {
                return Err(CoreError::TooManyObjects {
                    count: gt.len(),
                    queries: set.num_instances(),
                });
            }
            hungarian(&matching_cost(&set, gt, weights)?)
        })
        .collect()
}

/// Supervised set-prediction loss over all decoder layers, summed.
///
/// Each layer is matched independently; classification covers all M
/// queries (unmatched queries target the background class with
/// down-scaled weight), and the L1 and GIoU terms cover matched boxes.
pub fn detection_loss(
    g: &mut Graph,
    layer_preds: &[PredictionNodes],
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<NodeId, CoreError> {
    let assignments = match_layers(g, layer_preds, gt, weights)?;
    detection_loss_with_assignments(g, layer_preds, gt, weights, &assignments)
}

/// Same as [`detection_loss`] but with the per-layer assignments fixed by
/// the caller. Gradients therefore treat the matching as a constant.
pub fn detection_loss_with_assignments(
    g: &mut Graph,
    layer_preds: &[PredictionNodes],
    gt: &GroundTruth,
    weights: &LossWeights,
    assignments: &[Assignment],
) -> Result<NodeId, CoreError> {
    if layer_preds.len() != assignments.len() {
        return Err(CoreError::LayerCountMismatch {
            left: layer_preds.len(),
            right: assignments.len(),
        });
    }
    let mut total: Option<NodeId> = None;
    for (pred, assignment) in layer_preds.iter().zip(assignments) {
        let layer_loss = single_layer_loss(g, pred, gt, weights, assignment)?;
        total = Some(match total {
            Some(t) => g.add(t, layer_loss)?,
            None => layer_loss,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant_scalar(0.0)))
}

fn single_layer_loss(
    g: &mut Graph,
    pred: &PredictionNodes,
    gt: &GroundTruth,
    weights: &LossWeights,
    assignment: &Assignment,
) -> Result<NodeId, CoreError> {
    let (m, kp1) = {
        let s = g.shape(pred.class_probs);
        (s[0], s[1])
    };
    let background = kp1 - 1;

    // Classification: weighted negative log-likelihood over all queries,
    // normalized by the total target weight.
    let mut target_class = vec![background; m];
    for &(q, t) in &assignment.pairs {
        target_class[q] = gt.classes[t];
    }
    let mut mask = vec![0.0; m * kp1];
    let mut weight_sum = 0.0;
    for (q, &cls) in target_class.iter().enumerate() {
        let w = if cls == background {
            weights.background_weight
        } else {
            1.0
        };
        mask[q * kp1 + cls] = w;
        weight_sum += w;
    }
    let mask = g.constant(Tensor::new(vec![m, kp1], mask).expect("mask shape"));
    let logp = g.log(pred.class_probs);
    let picked = g.mul(logp, mask)?;
    let sum = g.sum(picked);
    let mut loss = g.scale(sum, -weights.class_weight / weight_sum);

    // Box terms over matched pairs only.
    if !assignment.pairs.is_empty() {
        let rows: Vec<NodeId> = assignment
            .pairs
            .iter()
            .map(|&(q, _)| g.slice(pred.boxes, 0, q, 1))
            .collect::<Result<_, _>>()?;
        let matched = g.concat(&rows, 0)?;
        let mut tgt = Vec::with_capacity(assignment.pairs.len() * 4);
        for &(_, t) in &assignment.pairs {
            tgt.extend_from_slice(&gt.boxes[t]);
        }
        let tgt = g.constant(Tensor::new(vec![assignment.pairs.len(), 4], tgt).expect("gt shape"));
        let count = assignment.pairs.len() as f64;

        let diff = g.sub(matched, tgt)?;
        let l1 = g.abs(diff);
        let l1_sum = g.sum(l1);
        let l1_term = g.scale(l1_sum, weights.l1_weight / count);
        loss = g.add(loss, l1_term)?;

        let giou_rows = giou_nodes(g, matched, tgt)?;
        let one_minus = {
            let neg = g.scale(giou_rows, -1.0);
            g.add_scalar(neg, 1.0)
        };
        let gsum = g.sum(one_minus);
        let giou_term = g.scale(gsum, weights.giou_weight / count);
        loss = g.add(loss, giou_term)?;
    }
    Ok(loss)
}

/// Differentiable per-row GIoU of two (n, 4) center-format box tensors,
/// returning an (n, 1) column.
pub fn giou_nodes(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, CoreError> {
    let col = |g: &mut Graph, x: NodeId, i: usize| g.slice(x, 1, i, 1);
    let half = |g: &mut Graph, x: NodeId| g.scale(x, 0.5);

    let (acx, acy, aw, ah) = (col(g, a, 0)?, col(g, a, 1)?, col(g, a, 2)?, col(g, a, 3)?);
    let (bcx, bcy, bw, bh) = (col(g, b, 0)?, col(g, b, 1)?, col(g, b, 2)?, col(g, b, 3)?);

    let ahw = half(g, aw);
    let ahh = half(g, ah);
    let bhw = half(g, bw);
    let bhh = half(g, bh);

    let ax1 = g.sub(acx, ahw)?;
    let ax2 = g.add(acx, ahw)?;
    let ay1 = g.sub(acy, ahh)?;
    let ay2 = g.add(acy, ahh)?;
    let bx1 = g.sub(bcx, bhw)?;
    let bx2 = g.add(bcx, bhw)?;
    let by1 = g.sub(bcy, bhh)?;
    let by2 = g.add(bcy, bhh)?;

    let ix1 = g.max_elem(ax1, bx1)?;
    let ix2 = g.min_elem(ax2, bx2)?;
    let iy1 = g.max_elem(ay1, by1)?;
    let iy2 = g.min_elem(ay2, by2)?;
    let iw = {
        let d = g.sub(ix2, ix1)?;
        g.relu(d)
    };
    let ih = {
        let d = g.sub(iy2, iy1)?;
        g.relu(d)
    };
    let inter = g.mul(iw, ih)?;

    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let areas = g.add(area_a, area_b)?;
    let union = g.sub(areas, inter)?;

    let ex1 = g.min_elem(ax1, bx1)?;
    let ex2 = g.max_elem(ax2, bx2)?;
    let ey1 = g.min_elem(ay1, by1)?;
    let ey2 = g.max_elem(ay2, by2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;

    let iou = g.div(inter, union)?;
    let excess = g.sub(enclosing, union)?;
    let penalty = g.div(excess, enclosing)?;
    Ok(g.sub(iou, penalty)?)
}
