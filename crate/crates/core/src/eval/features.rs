//! Raw feature dumps and a 2-D PCA projection for plotting the
//! source/target feature distributions per stage and layer.

use std::io::Write;
use std::path::Path;

use autodiff::Graph;

use crate::data::Scene;
use crate::error::CoreError;
use crate::model::DetectionModel;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStage {
    /// Projected backbone tokens before the encoder.
    Backbone,
    /// Encoder layer outputs (domain-query slot excluded).
    Encoder,
    /// Decoder layer outputs (domain-query slot excluded).
    Decoder,
}

impl FeatureStage {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "backbone" => Some(Self::Backbone),
            "encoder" => Some(Self::Encoder),
            "decoder" => Some(Self::Decoder),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
        }
    }
}

/// One token's features at a given stage and layer.
#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub stage: FeatureStage,
    pub layer: usize,
    pub domain: u8,
    pub values: Vec<f64>,
}

/// Collects per-token features for every scene at one stage. Token
/// subsampling keeps every `stride`-th token (1 keeps all).
pub fn collect_features(
    model: &DetectionModel,
    store: &ParamStore,
    scenes: &[Scene],
    stage: FeatureStage,
    stride: usize,
) -> Result<Vec<FeatureRow>, CoreError> {
    let stride = stride.max(1);
    let mut rows = Vec::new();
    for scene in scenes {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let pass = model.forward(&mut g, &bind, &scene.image, true)?;
        let mut emit = |tokens_id, layer: usize, skip_first: bool| {
            let t = g.value(tokens_id);
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let start = usize::from(skip_first);
            for i in (start..n).step_by(stride) {
                rows.push(FeatureRow {
                    stage,
                    layer,
                    domain: scene.domain,
                    values: t.data()[i * c..(i + 1) * c].to_vec(),
                });
            }
        };
        match stage {
            FeatureStage::Backbone => emit(pass.projected_tokens, 0, false),
            FeatureStage::Encoder => {
                for state in &pass.encoder_states {
                    emit(state.tokens, state.layer_index, state.has_domain_query);
                }
            }
            FeatureStage::Decoder => {
                for state in &pass.decoder_states {
                    emit(state.tokens, state.layer_index, state.has_domain_query);
                }
            }
        }
    }
    Ok(rows)
}

/// Writes `stage,layer,domain,f0..f{C-1}` rows.
pub fn write_feature_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), CoreError> {
    let mut out = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut header = String::from("stage,layer,domain");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    header.push('\n');
    out.write_all(header.as_bytes())
        .map_err(|e| CoreError::io(path, e))?;
    for row in rows {
        let mut line = format!("{},{},{}", row.stage.as_str(), row.layer, row.domain);
        for v in &row.values {
            line.push_str(&format!(",{v:.6}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes())
            .map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

/// Projects rows onto their top two principal components (computed over
/// all rows together after centering).
pub fn pca_2d(rows: &[FeatureRow]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let n = rows.len();
    let d = rows[0].values.len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(&row.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // Covariance (d x d), then top-2 eigenvectors by power iteration
    // with deflation.
    let mut cov = vec![0.0; d * d];
    for row in rows {
        for i in 0..d {
            let xi = row.values[i] - mean[i];
            let cov_row = &mut cov[i * d..(i + 1) * d];
            for (j, c) in cov_row.iter_mut().enumerate() {
                *c += xi * (row.values[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let mut components = Vec::with_capacity(2);
    let mut work = cov.clone();
    let mut first_value = 0.0;
    for k in 0..2 {
        let (vec_, val) = top_eigen(&work, d);
        if k == 0 {
            first_value = val;
        }
        // A component whose variance collapsed relative to the first is
        // numerically meaningless; a zero vector projects to zero.
        let vec_ = if k > 0 && val <= first_value * 1e-12 {
            vec![0.0; d]
        } else {
            vec_
        };
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= val * vec_[i] * vec_[j];
            }
        }
        components.push(vec_);
    }

    rows.iter()
        .map(|row| {
            let mut p = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                p[k] = row
                    .values
                    .iter()
                    .zip(comp)
                    .zip(&mean)
                    .map(|((v, c), m)| (v - m) * c)
                    .sum();
            }
            p
        })
        .collect()
}

fn top_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut value = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            next[i] = matrix[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return (v, 0.0);
        }
        next.iter_mut().for_each(|x| *x /= norm);
        value = norm;
        v = next;
    }
    (v, value)
}

/// Writes `stage,layer,domain,pc1,pc2` rows.
pub fn write_pca_csv(path: &Path, rows: &[FeatureRow], projections: &[[f64; 2]]) -> Result<(), CoreError> {
    debug_assert_eq!(rows.len(), projections.len());
    let mut out = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    out.write_all(b"stage,layer,domain,pc1,pc2\n")
        .map_err(|e| CoreError::io(path, e))?;
    for (row, p) in rows.iter().zip(projections) {
        let line = format!(
            "{},{},{},{:.6},{:.6}\n",
            row.stage.as_str(),
            row.layer,
            row.domain,
            p[0],
            p[1]
        );
        out.write_all(line.as_bytes())
            .map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_of_rank_one_data_has_tiny_second_component() {
        // Points along a single direction: pc2 collapses.
        let rows: Vec<FeatureRow> = (0..32)
            .map(|i| FeatureRow {
                stage: FeatureStage::Backbone,
                layer: 0,
                domain: 0,
                values: vec![i as f64, 2.0 * i as f64, -i as f64],
            })
            .collect();
        let proj = pca_2d(&rows);
        let spread1: f64 = proj.iter().map(|p| p[0] * p[0]).sum();
        let spread2: f64 = proj.iter().map(|p| p[1] * p[1]).sum();
        assert!(spread2 < spread1 * 1e-9, "pc2 {spread2} vs pc1 {spread1}");
    }
}
