//! Adversarial sequence feature alignment.
//!
//! Domain discriminators classify features as source (0) or target (1).
//! A gradient-reversal layer sits between the features and each
//! discriminator, so minimizing the discriminator's negative
//! log-likelihood simultaneously trains the discriminator and pushes the
//! feature extractor toward domain confusion. The encoder pair of losses
//! (domain-query and token-wise) shares one discriminator, as does the
//! decoder pair.

use autodiff::{Graph, NodeId};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::model::{Linear, SequenceState};
use crate::params::{Binding, ParamStore};

/// Three affine layers (C x C, C x C, C x 2) with rectifiers in between
/// and a final two-way softmax.
#[derive(Debug, Clone)]
pub struct Discriminator {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim, dim),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), dim, 2),
        }
    }

    /// Maps (R, C) features to (R, 2) domain probabilities per row.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId, CoreError> {
        let h = self.fc1.forward(g, bind, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, bind, h)?;
        let h = g.relu(h);
        let logits = self.fc3.forward(g, bind, h)?;
        Ok(g.softmax(logits)?)
    }

    /// The three weight matrices, for capacity diagnostics.
    pub fn weight_params(&self) -> [crate::params::ParamId; 3] {
        [self.fc1.w, self.fc2.w, self.fc3.w]
    }
}

/// Negative log-likelihood of the true domain, averaged over rows:
/// `-(1/R) sum_i [d log p_i[1] + (1-d) log p_i[0]]`.
///
/// For a single-row input this is the plain binary cross-entropy of that
/// row. Both domain-query and token-wise losses use this one orientation,
/// so every alignment loss is minimized by a correct discriminator.
pub fn domain_bce(g: &mut Graph, probs: NodeId, domain: u8) -> Result<NodeId, CoreError> {
    let shape = g.shape(probs).to_vec();
    let (rows, cols) = match shape.as_slice() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => {
            return Err(CoreError::Config(format!(
                "domain_bce expects (R,2) probabilities, got {shape:?}"
            )))
        }
    };
    debug_assert_eq!(cols, 2);
    let axis = shape.len() - 1;
    let picked = g.slice(probs, axis, domain as usize, 1)?;
    let logp = g.log(picked);
    let total = g.sum(logp);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// Domain-query alignment: one loss per layer, computed on the
/// gradient-reversed domain-query slot.
pub fn dqfa_losses(
    g: &mut Graph,
    bind: &Binding,
    states: &[SequenceState],
    disc: &Discriminator,
    domain: u8,
) -> Result<Vec<NodeId>, CoreError> {
    states
        .iter()
        .map(|state| {
            if !state.has_domain_query {
                return Err(CoreError::MissingDomainQuery {
                    layer: state.layer_index,
                });
            }
            let slot = g.slice(state.tokens, 0, 0, 1)?;
            let reversed = g.grad_reverse(slot);
            let probs = disc.forward(g, bind, reversed)?;
            domain_bce(g, probs, domain)
        })
        .collect()
}

/// Token-wise alignment: one loss per layer, the mean over all ordinary
/// tokens (domain-query slot excluded) of the per-token domain BCE.
pub fn tda_losses(
    g: &mut Graph,
    bind: &Binding,
    states: &[SequenceState],
    disc: &Discriminator,
    domain: u8,
) -> Result<Vec<NodeId>, CoreError> {
    states
        .iter()
        .map(|state| {
            let tokens = if state.has_domain_query {
                let n = g.shape(state.tokens)[0] - 1;
                g.slice(state.tokens, 0, 1, n)?
            } else {
                state.tokens
            };
            let reversed = g.grad_reverse(tokens);
            let probs = disc.forward(g, bind, reversed)?;
            domain_bce(g, probs, domain)
        })
        .collect()
}

/// Hierarchical aggregation over layers:
/// `sum_l (tda_l + lambda_q * dqfa_l)`.
pub fn hierarchical_loss(
    g: &mut Graph,
    dqfa: &[NodeId],
    tda: &[NodeId],
    lambda_q: f64,
) -> Result<NodeId, CoreError> {
    if dqfa.len() != tda.len() {
        return Err(CoreError::LayerCountMismatch {
            left: dqfa.len(),
            right: tda.len(),
        });
    }
    let mut total: Option<NodeId> = None;
    for (&dq, &tw) in dqfa.iter().zip(tda) {
        let weighted = g.scale(dq, lambda_q);
        let layer = g.add(tw, weighted)?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant_scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Tensor;

    #[test]
    fn bce_uniform_output_is_ln2() {
        for d in [0u8, 1u8] {
            let mut g = Graph::new();
            let p = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
            let loss = domain_bce(&mut g, p, d).unwrap();
            assert!((g.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_perfect_source_prediction_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = domain_bce(&mut g, p, 0).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
    }

    #[test]
    fn bce_direct_evaluation() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap());
        let loss = domain_bce(&mut g, p, 1).unwrap();
        assert!((g.scalar_value(loss) - (-(0.25f64.ln()))).abs() < 1e-12);
        assert!((g.scalar_value(loss) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn bce_token_mean_with_clamped_log() {
        // Two tokens, one classified perfectly and one completely wrong:
        // the mean is dominated by the clamped -ln(1e-12) term.
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let loss = domain_bce(&mut g, p, 0).unwrap();
        let expect = (0.0 - autodiff::LOG_CLAMP.ln()) / 2.0;
        assert!((g.scalar_value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn hierarchical_sum_matches_hand_value() {
        // Three layers all at ln 2 with lambda_q = 0.1:
        // 3 * 1.1 * ln 2 = 2.287385...
        let mut g = Graph::new();
        let ln2 = std::f64::consts::LN_2;
        let dq: Vec<NodeId> = (0..3).map(|_| g.constant_scalar(ln2)).collect();
        let tw: Vec<NodeId> = (0..3).map(|_| g.constant_scalar(ln2)).collect();
        let total = hierarchical_loss(&mut g, &dq, &tw, 0.1).unwrap();
        assert!((g.scalar_value(total) - 3.3 * ln2).abs() < 1e-12);
        assert!((g.scalar_value(total) - 2.287385).abs() < 1e-6);
    }

    #[test]
    fn hierarchical_lambda_zero_is_pure_token_sum() {
        let mut g = Graph::new();
        let dq: Vec<NodeId> = vec![g.constant_scalar(100.0)];
        let tw: Vec<NodeId> = vec![g.constant_scalar(0.25)];
        let total = hierarchical_loss(&mut g, &dq, &tw, 0.0).unwrap();
        assert_eq!(g.scalar_value(total), 0.25);
    }

    #[test]
    fn hierarchical_rejects_length_mismatch() {
        let mut g = Graph::new();
        let a = vec![g.constant_scalar(1.0)];
        let b = vec![g.constant_scalar(1.0), g.constant_scalar(2.0)];
        assert!(matches!(
            hierarchical_loss(&mut g, &a, &b, 0.1),
            Err(CoreError::LayerCountMismatch { left: 1, right: 2 })
        ));
    }
}
