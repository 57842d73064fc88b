//! Bipartite matching consistency: every decoder layer's predictions are
//! pulled toward the layer-averaged ensemble via Jensen-Shannon
//! divergence on classes and L1 distance on boxes.
//!
//! The ensemble reference is treated as a constant: gradients flow into
//! each layer's predictions but never into the reference, which prevents
//! the layers from chasing a moving average.

use autodiff::{Graph, NodeId, Tensor, LOG_CLAMP};

use crate::error::CoreError;
use crate::model::{DetectionSet, PredictionNodes};

/// Mean over decoder layers of the class probabilities and boxes; query
/// index i is averaged with query index i (object-query identity gives
/// the correspondence).
pub fn ensemble_reference(layers: &[DetectionSet]) -> Result<DetectionSet, CoreError> {
    let first = layers.first().ok_or(CoreError::EmptyEnsemble)?;
    let n = layers.len() as f64;
    let mut probs = vec![0.0; first.class_probs.numel()];
    let mut boxes = vec![0.0; first.boxes.numel()];
    for layer in layers {
        if layer.class_probs.numel() != probs.len() || layer.boxes.numel() != boxes.len() {
            return Err(CoreError::SetSizeMismatch {
                left: first.num_instances(),
                right: layer.num_instances(),
            });
        }
        for (acc, v) in probs.iter_mut().zip(layer.class_probs.data()) {
            *acc += v;
        }
        for (acc, v) in boxes.iter_mut().zip(layer.boxes.data()) {
            *acc += v;
        }
    }
    probs.iter_mut().for_each(|v| *v /= n);
    boxes.iter_mut().for_each(|v| *v /= n);
    Ok(DetectionSet {
        class_probs: Tensor::new(first.class_probs.shape().to_vec(), probs).expect("probs shape"),
        boxes: Tensor::new(first.boxes.shape().to_vec(), boxes).expect("boxes shape"),
    })
}

/// Jensen-Shannon divergence between two probability vectors, natural
/// log, with the same clamp convention as the graph `log`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        let lm = mi.max(LOG_CLAMP).ln();
        if pi > 0.0 {
            acc += 0.5 * pi * (pi.max(LOG_CLAMP).ln() - lm);
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi.max(LOG_CLAMP).ln() - lm);
        }
    }
    acc
}

/// Consistency between a constant reference set and one layer's
/// prediction nodes, summed over the M query slots:
/// `sum_i [JSD(ref_c_i || c_i) + lambda_l1 * |ref_b_i - b_i|_1]`.
pub fn consistency_pair_loss(
    g: &mut Graph,
    reference: &DetectionSet,
    pred: &PredictionNodes,
    lambda_l1: f64,
) -> Result<NodeId, CoreError> {
    let pred_shape = g.shape(pred.class_probs).to_vec();
    if pred_shape != reference.class_probs.shape() {
        return Err(CoreError::SetSizeMismatch {
            left: reference.num_instances(),
            right: pred_shape[0],
        });
    }

    // JSD summed over all (query, class) entries. The p-side entropy term
    // is a constant; the rest touches the prediction node.
    let p_const = g.constant(clone_tensor(&reference.class_probs));
    let q = pred.class_probs;
    let sum_nodes = {
        let half_p = g.scale(p_const, 0.5);
        let half_q = g.scale(q, 0.5);
        g.add(half_p, half_q)?
    };
    let log_m = g.log(sum_nodes);

    let p_entropy: f64 = reference
        .class_probs
        .data()
        .iter()
        .map(|&pi| {
            if pi > 0.0 {
                pi * pi.max(LOG_CLAMP).ln()
            } else {
                0.0
            }
        })
        .sum();
    let p_log_p = g.constant_scalar(p_entropy);

    let p_log_m = {
        let prod = g.mul(p_const, log_m)?;
        g.sum(prod)
    };
    let q_log_q = {
        let log_q = g.log(q);
        let prod = g.mul(q, log_q)?;
        g.sum(prod)
    };
    let q_log_m = {
        let prod = g.mul(q, log_m)?;
        g.sum(prod)
    };

    let kl_p = g.sub(p_log_p, p_log_m)?;
    let kl_q = g.sub(q_log_q, q_log_m)?;
    let kl_sum = g.add(kl_p, kl_q)?;
    let jsd_total = g.scale(kl_sum, 0.5);

    let b_const = g.constant(clone_tensor(&reference.boxes));
    let diff = g.sub(b_const, pred.boxes)?;
    let l1 = g.abs(diff);
    let l1_sum = g.sum(l1);
    let l1_term = g.scale(l1_sum, lambda_l1);

    Ok(g.add(jsd_total, l1_term)?)
}

/// Mean over decoder layers of the pair loss against the detached
/// ensemble reference.
pub fn consistency_loss(
    g: &mut Graph,
    layer_preds: &[PredictionNodes],
    lambda_l1: f64,
) -> Result<NodeId, CoreError> {
    let detached: Vec<DetectionSet> = layer_preds.iter().map(|p| p.detach(g)).collect();
    let reference = ensemble_reference(&detached)?;
    let mut total: Option<NodeId> = None;
    for pred in layer_preds {
        let pair = consistency_pair_loss(g, &reference, pred, lambda_l1)?;
        total = Some(match total {
            Some(t) => g.add(t, pair)?,
            None => pair,
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, 1.0 / layer_preds.len() as f64))
}

fn clone_tensor(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("tensor shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn set(probs: Vec<f64>, boxes: Vec<f64>, m: usize, k: usize) -> DetectionSet {
        DetectionSet {
            class_probs: Tensor::new(vec![m, k], probs).unwrap(),
            boxes: Tensor::new(vec![m, 4], boxes).unwrap(),
        }
    }

    #[test]
    fn jsd_of_identical_distributions_is_zero() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn jsd_disjoint_supports_is_ln2() {
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_direct_evaluation() {
        // JSD((0.5, 0.5), (1, 0)) = 0.5*KL(p||m) + 0.5*KL(q||m) with
        // m = (0.75, 0.25).
        let v = jsd(&[0.5, 0.5], &[1.0, 0.0]);
        let kl_p = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let kl_q = (1.0f64 / 0.75).ln();
        let expect = 0.5 * (kl_p + kl_q);
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.215761).abs() < 1e-6);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        assert!((jsd(&p, &q) - jsd(&q, &p)).abs() < 1e-15);
        assert!(jsd(&p, &q) <= LN_2);
        assert!(jsd(&p, &q) >= 0.0);
    }

    #[test]
    fn ensemble_mean_of_two_layers() {
        let a = set(vec![1.0, 0.0], vec![0.1, 0.1, 0.2, 0.2], 1, 2);
        let b = set(vec![0.0, 1.0], vec![0.3, 0.3, 0.2, 0.2], 1, 2);
        let r = ensemble_reference(&[a, b]).unwrap();
        assert_eq!(r.class_probs.data(), &[0.5, 0.5]);
        assert_eq!(r.boxes.data(), &[0.2, 0.2, 0.2, 0.2]);
        // The mean of row-stochastic rows is row-stochastic.
        assert!((r.class_row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_rejects_empty() {
        assert!(matches!(
            ensemble_reference(&[]),
            Err(CoreError::EmptyEnsemble)
        ));
    }

    #[test]
    fn pair_loss_identical_sets_is_zero() {
        let reference = set(vec![0.25; 4], vec![0.5; 4], 1, 4);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![1, 4], vec![0.25; 4]).unwrap()),
            boxes: g.constant(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap()),
        };
        let loss = consistency_pair_loss(&mut g, &reference, &pred, 1.0).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_pure_l1() {
        // Equal classes, each of four box coordinates off by 0.1 with
        // lambda = 1: loss 0.4.
        let reference = set(vec![1.0, 0.0], vec![0.5, 0.5, 0.2, 0.2], 1, 2);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()),
            boxes: g.constant(Tensor::new(vec![1, 4], vec![0.6, 0.6, 0.3, 0.3]).unwrap()),
        };
        let loss = consistency_pair_loss(&mut g, &reference, &pred, 1.0).unwrap();
        assert!((g.scalar_value(loss) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn pair_loss_single_divergent_query() {
        // M = 2: one query pair at JSD = ln 2, the other identical;
        // lambda = 0 makes the loss exactly ln 2.
        let reference = set(vec![1.0, 0.0, 0.5, 0.5], vec![0.5; 8], 2, 2);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap()),
            boxes: g.constant(Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap()),
        };
        let loss = consistency_pair_loss(&mut g, &reference, &pred, 0.0).unwrap();
        assert!((g.scalar_value(loss) - LN_2).abs() < 1e-9);
    }

    #[test]
    fn consistency_loss_zero_iff_layers_agree() {
        let mut g = Graph::new();
        let layer = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap()),
            boxes: g.constant(Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap()),
        };
        // Single layer: the reference equals the layer.
        let loss = consistency_loss(&mut g, &[layer], 1.0).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);

        // Identical layers.
        let loss = consistency_loss(&mut g, &[layer, layer, layer], 1.0).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);

        // Diverging layers give a strictly positive loss.
        let other = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.2, 0.0, 1.0, 0.0]).unwrap()),
            boxes: g.constant(Tensor::new(vec![2, 4], vec![0.4; 8]).unwrap()),
        };
        let loss = consistency_loss(&mut g, &[layer, other], 1.0).unwrap();
        assert!(g.scalar_value(loss) > 1e-3);
    }

    #[test]
    fn consistency_symmetric_two_layer_divergence() {
        // Two layers diverging only in classification, symmetric around
        // their mean: the loss equals the common JSD against the mean.
        let mut g = Graph::new();
        let a = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![1, 2], vec![0.8, 0.2]).unwrap()),
            boxes: g.constant(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap()),
        };
        let b = PredictionNodes {
            class_probs: g.constant(Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap()),
            boxes: g.constant(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap()),
        };
        let loss = consistency_loss(&mut g, &[a, b], 1.0).unwrap();
        let d = jsd(&[0.5, 0.5], &[0.8, 0.2]);
        assert!((g.scalar_value(loss) - d).abs() < 1e-12);
    }
}
