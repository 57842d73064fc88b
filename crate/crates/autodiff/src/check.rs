//! Finite-difference verification of analytic gradients.

use crate::error::AutodiffError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// One flagged discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all input elements.
    pub max_rel_error: f64,
    /// Entries whose relative error exceeded the tolerance.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor so that finite-difference noise
/// around zero gradients is not over-penalized.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-3)
}

/// Compares the analytic gradient of a scalar-valued graph function
/// against central finite differences `(f(x+eps) - f(x-eps)) / (2 eps)`
/// evaluated element by element.
///
/// The closure must build the same computation for every call; it receives
/// leaf node ids for `inputs` in order. Functions containing
/// `grad_reverse` are not finite-difference-consistent by construction
/// (the forward pass hides the negation), so check those against the
/// negated numeric gradient separately.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    if eps <= 0.0 {
        return Err(AutodiffError::InvalidEpsilon { eps });
    }

    let eval = |tensors: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &ids)?;
        if !g.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: g.shape(loss).to_vec(),
            });
        }
        Ok(g.scalar_value(loss))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("input shape")
                .with_grad()
        })
        .collect();
    let ids: Vec<NodeId> = tracked.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(AutodiffError::NonScalarLoss {
            shape: g.shape(loss).to_vec(),
        });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    // Numeric pass, one element at a time.
    let mut work: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("input shape"))
        .collect();
    let mut max_rel = 0.0_f64;
    let mut failures = Vec::new();
    for ti in 0..work.len() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[ti][ei];
            let rel = rel_error(a, numeric);
            max_rel = max_rel.max(rel);
            if rel > tol {
                failures.push(GradCheckEntry {
                    input: ti,
                    index: ei,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        failures,
    })
}
