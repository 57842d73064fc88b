//! Capacity diagnostic: an epsilon-covering-number bound for the domain
//! discriminator, parametric in the layer count.

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Inputs of the covering bound. Vectors are indexed by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Spectral norm bound s_i of each weight matrix.
    pub spectral_norms: Vec<f64>,
    /// Distance b_i of each weight matrix to its reference matrix.
    pub reference_distances: Vec<f64>,
    /// Lipschitz constant rho_i of each nonlinearity (1 for rectifiers).
    pub lipschitz: Vec<f64>,
    /// Largest feature-map dimension W throughout the network.
    pub max_width: f64,
    /// Norm of the input data matrix.
    pub input_norm: f64,
    /// Covering resolution epsilon.
    pub resolution: f64,
}

/// Log covering number bound:
/// `log(2 W^2) * |X|^2 / eps^2 * (prod_i s_i rho_i)^2 * sum_i b_i^2 / s_i^2`.
///
/// Natural logarithm; with all-unit rectifier constants this reduces to
/// the plain product-of-spectral-norms form.
pub fn covering_bound(inputs: &BoundInputs) -> Result<f64, CoreError> {
    let n = inputs.spectral_norms.len();
    if inputs.reference_distances.len() != n || inputs.lipschitz.len() != n {
        return Err(CoreError::BoundLengthMismatch {
            norms: n,
            distances: inputs.reference_distances.len(),
            lipschitz: inputs.lipschitz.len(),
        });
    }
    for (field, values) in [
        ("spectral_norms", &inputs.spectral_norms),
        ("lipschitz", &inputs.lipschitz),
    ] {
        if let Some(&bad) = values.iter().find(|v| !(**v > 0.0)) {
            return Err(CoreError::NonPositiveBoundInput { field, value: bad });
        }
    }
    for (field, value) in [
        ("max_width", inputs.max_width),
        ("input_norm", inputs.input_norm),
        ("resolution", inputs.resolution),
    ] {
        if !(value > 0.0) {
            return Err(CoreError::NonPositiveBoundInput { field, value });
        }
    }
    if let Some(&bad) = inputs.reference_distances.iter().find(|v| !(**v >= 0.0)) {
        return Err(CoreError::NonPositiveBoundInput {
            field: "reference_distances",
            value: bad,
        });
    }

    let product: f64 = inputs
        .spectral_norms
        .iter()
        .zip(&inputs.lipschitz)
        .map(|(s, r)| s * r)
        .product();
    let ratio_sum: f64 = inputs
        .reference_distances
        .iter()
        .zip(&inputs.spectral_norms)
        .map(|(b, s)| (b * b) / (s * s))
        .sum();
    let front = (2.0 * inputs.max_width * inputs.max_width).ln() * inputs.input_norm
        * inputs.input_norm
        / (inputs.resolution * inputs.resolution);
    Ok(front * product * product * ratio_sum)
}

/// Largest singular value of a 2-D tensor via power iteration with a
/// deterministic start vector.
pub fn spectral_norm(matrix: &Tensor) -> f64 {
    let shape = matrix.shape();
    debug_assert_eq!(shape.len(), 2);
    let (rows, cols) = (shape[0], shape[1]);
    let a = matrix.data();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..100 {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * cols..(i + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(x, y)| x * y)
                .sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= un);
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| a[i * cols + j] * u[i]).sum();
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        sigma = vn;
    }
    sigma
}

/// Frobenius norm, the matrix norm used for the input term.
pub fn frobenius_norm(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_inputs() -> BoundInputs {
        BoundInputs {
            spectral_norms: vec![1.0; 3],
            reference_distances: vec![1.0; 3],
            lipschitz: vec![1.0; 3],
            max_width: 256.0,
            input_norm: 1.0,
            resolution: 1.0,
        }
    }

    #[test]
    fn direct_evaluation_matches_hand_value() {
        // ln(2 * 256^2) * 3 = 17 ln 2 * 3.
        let v = covering_bound(&unit_inputs()).unwrap();
        let expect = 3.0 * (131072f64).ln();
        assert!((v - expect).abs() < 1e-9);
        assert!((v - 35.35050620855721).abs() < 1e-9);
    }

    #[test]
    fn zero_reference_distance_gives_zero() {
        let mut inputs = unit_inputs();
        inputs.reference_distances = vec![0.0; 3];
        assert_eq!(covering_bound(&inputs).unwrap(), 0.0);
    }

    #[test]
    fn doubling_resolution_quarters_the_bound() {
        let base = covering_bound(&unit_inputs()).unwrap();
        let mut inputs = unit_inputs();
        inputs.resolution = 2.0;
        let coarser = covering_bound(&inputs).unwrap();
        assert!((coarser - base / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_spectral_norm_is_rejected() {
        let mut inputs = unit_inputs();
        inputs.spectral_norms[1] = 0.0;
        assert!(matches!(
            covering_bound(&inputs),
            Err(CoreError::NonPositiveBoundInput {
                field: "spectral_norms",
                ..
            })
        ));
    }

    #[test]
    fn monotone_in_distances_input_norm_and_resolution() {
        let base = covering_bound(&unit_inputs()).unwrap();
        let mut bigger_b = unit_inputs();
        bigger_b.reference_distances[0] = 2.0;
        assert!(covering_bound(&bigger_b).unwrap() > base);
        let mut bigger_x = unit_inputs();
        bigger_x.input_norm = 3.0;
        assert!(covering_bound(&bigger_x).unwrap() > base);
        let mut finer = unit_inputs();
        finer.resolution = 0.5;
        assert!(covering_bound(&finer).unwrap() > base);
    }

    #[test]
    fn layer_count_is_parametric() {
        let five = BoundInputs {
            spectral_norms: vec![1.0; 5],
            reference_distances: vec![1.0; 5],
            lipschitz: vec![1.0; 5],
            max_width: 256.0,
            input_norm: 1.0,
            resolution: 1.0,
        };
        let v = covering_bound(&five).unwrap();
        assert!((v - 5.0 * (131072f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let t = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((spectral_norm(&t) - 3.0).abs() < 1e-9);
    }
}
