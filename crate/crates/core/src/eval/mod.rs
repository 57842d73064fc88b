//! Evaluation and diagnostics: mean average precision, feature
//! distribution dumps, domain-divergence estimation, and the
//! discriminator capacity bound.

mod bound;
mod divergence;
mod features;

pub use bound::{covering_bound, frobenius_norm, spectral_norm, BoundInputs};
pub use divergence::proxy_a_distance;
pub use features::{
    collect_features, pca_2d, write_feature_csv, write_pca_csv, FeatureRow, FeatureStage,
};

use autodiff::Graph;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::CoreError;
use crate::matching::iou;
use crate::model::DetectionModel;
use crate::params::ParamStore;

/// One thresholded detection.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Per-class average precision at one IoU threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: usize,
    pub ap: f64,
    pub num_ground_truth: usize,
    pub num_predictions: usize,
    /// (recall, precision) points along the ranked detections.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Evaluation summary. `map` is the unweighted mean over classes that
/// appear in the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    pub map: f64,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Extracts thresholded detections from the final decoder layer for one
/// scene. Each query contributes at most one detection: its best
/// non-background class.
pub fn scene_detections(
    model: &DetectionModel,
    store: &ParamStore,
    scene: &Scene,
    score_threshold: f64,
) -> Result<Vec<Detection>, CoreError> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let pass = model.forward(&mut g, &bind, &scene.image, true)?;
    let last = pass.predictions.last().expect("decoder layers");
    let set = last.detach(&g);
    let k = model.cfg.num_classes;
    let mut detections = Vec::new();
    for q in 0..set.num_instances() {
        let probs = set.class_row(q);
        let (mut best_class, mut best_score) = (0, probs[0]);
        for (c, &p) in probs.iter().enumerate().take(k) {
            if p > best_score {
                best_class = c;
                best_score = p;
            }
        }
        if best_score >= score_threshold {
            detections.push(Detection {
                class: best_class,
                score: best_score,
                bbox: set.box_row(q),
            });
        }
    }
    Ok(detections)
}

/// Mean average precision with greedy one-to-one matching at the given
/// IoU threshold and all-point precision interpolation. Classes absent
/// from the ground truth are excluded from the mean.
pub fn evaluate_map(
    model: &DetectionModel,
    store: &ParamStore,
    scenes: &[Scene],
    score_threshold: f64,
    iou_threshold: f64,
) -> Result<EvalReport, CoreError> {
    let per_scene = parallel_scene_detections(model, store, scenes, score_threshold)?;

    let k = model.cfg.num_classes;
    let mut classes = Vec::with_capacity(k);
    let mut total_predictions = 0;
    let mut total_gt = 0;
    for class in 0..k {
        // Ranked detections of this class over all scenes.
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new(); // (score, scene, det idx)
        for (si, dets) in per_scene.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class == class {
                    ranked.push((d.score, si, di));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let num_gt: usize = scenes
            .iter()
            .map(|s| s.annotations.classes.iter().filter(|&&c| c == class).count())
            .sum();
        total_gt += num_gt;
        total_predictions += ranked.len();

        let mut matched: Vec<Vec<bool>> = scenes
            .iter()
            .map(|s| vec![false; s.annotations.len()])
            .collect();
        let mut tp = 0usize;
        let mut pr_curve = Vec::with_capacity(ranked.len());
        let mut tps = Vec::with_capacity(ranked.len());
        for &(_, si, di) in &ranked {
            let det = &per_scene[si][di];
            let ann = &scenes[si].annotations;
            let mut best: Option<(usize, f64)> = None;
            for (gi, (&gc, &gb)) in ann.classes.iter().zip(&ann.boxes).enumerate() {
                if gc != class || matched[si][gi] {
                    continue;
                }
                let overlap = iou(det.bbox, gb);
                if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
            let is_tp = if let Some((gi, _)) = best {
                matched[si][gi] = true;
                tp += 1;
                true
            } else {
                false
            };
            tps.push(is_tp);
            let rank = pr_curve.len() + 1;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            pr_curve.push((recall, tp as f64 / rank as f64));
        }

        let ap = if num_gt == 0 { 0.0 } else { all_point_ap(&pr_curve) };
        classes.push(ClassEval {
            class,
            ap,
            num_ground_truth: num_gt,
            num_predictions: ranked.len(),
            pr_curve,
        });
    }

    let populated: Vec<f64> = classes
        .iter()
        .filter(|c| c.num_ground_truth > 0)
        .map(|c| c.ap)
        .collect();
    let map = if populated.is_empty() {
        0.0
    } else {
        populated.iter().sum::<f64>() / populated.len() as f64
    };
    Ok(EvalReport {
        classes,
        map,
        num_predictions: total_predictions,
        num_ground_truth: total_gt,
        iou_threshold,
        score_threshold,
        arm: None,
        checkpoint: None,
    })
}

/// Area under the precision envelope: sum over recall increments of the
/// best precision at or beyond that recall.
fn all_point_ap(pr_curve: &[(f64, f64)]) -> f64 {
    if pr_curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = pr_curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in pr_curve.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    ap
}

/// Runs scene detection across worker threads; the frozen model is
/// read-shared and results keep scene order.
fn parallel_scene_detections(
    model: &DetectionModel,
    store: &ParamStore,
    scenes: &[Scene],
    score_threshold: f64,
) -> Result<Vec<Vec<Detection>>, CoreError> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(scenes.len().max(1));
    if workers <= 1 || scenes.len() < 4 {
        return scenes
            .iter()
            .map(|s| scene_detections(model, store, s, score_threshold))
            .collect();
    }
    let mut results: Vec<Option<Result<Vec<Detection>, CoreError>>> = Vec::new();
    results.resize_with(scenes.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= scenes.len() {
                    break;
                }
                let out = scene_detections(model, store, &scenes[i], score_threshold);
                slots.lock().expect("result lock")[i] = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_perfect_single_detection() {
        let pr = vec![(1.0, 1.0)];
        assert_eq!(all_point_ap(&pr), 1.0);
    }

    #[test]
    fn ap_precision_dip_after_full_recall() {
        // One GT: a correct high-score detection then a spurious one.
        // The envelope keeps AP at 1.0.
        let pr = vec![(1.0, 1.0), (1.0, 0.5)];
        assert_eq!(all_point_ap(&pr), 1.0);
    }

    #[test]
    fn ap_half_recall() {
        // Two GTs, one matched at rank 1, nothing else found.
        let pr = vec![(0.5, 1.0)];
        assert_eq!(all_point_ap(&pr), 0.5);
    }

    #[test]
    fn ap_is_monotone_transform_invariant() {
        // AP depends only on the ranking, so it is invariant to strictly
        // monotone score transforms by construction; the curve here
        // simulates the same ranking twice.
        let pr = vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)];
        let ap = all_point_ap(&pr);
        assert!((ap - (0.5 * 1.0 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);
    }
}
