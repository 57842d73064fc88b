//! Positional, level, and query embeddings.

use autodiff::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::params::{normal_init, ParamId, ParamStore};

/// Fixed 2-D sinusoidal position table for one feature level, shape
/// (h*w, dim). Half the channels encode the row, half the column, with
/// alternating sine/cosine pairs and geometric frequencies.
pub fn sinusoidal_table(h: usize, w: usize, dim: usize) -> Tensor {
    debug_assert_eq!(dim % 4, 0, "position dim must be divisible by 4");
    let half = dim / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = vec![0.0; h * w * dim];
    for y in 0..h {
        let ny = (y as f64 + 0.5) / h as f64 * two_pi;
        for x in 0..w {
            let nx = (x as f64 + 0.5) / w as f64 * two_pi;
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..half / 2 {
                let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (ny / freq).sin();
                row[2 * i + 1] = (ny / freq).cos();
                row[half + 2 * i] = (nx / freq).sin();
                row[half + 2 * i + 1] = (nx / freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, dim], data).expect("sinusoid shape")
}

/// Learned embeddings: per-level tokens, domain queries and their
/// dedicated position slots, object queries, and the decoder position
/// table. The domain-query position embedding is a learned vector, not a
/// spatial sinusoid.
#[derive(Debug, Clone)]
pub struct ModelEmbeddings {
    /// One learned (1, C) vector per feature level, broadcast over that
    /// level's tokens.
    pub level: Vec<ParamId>,
    /// Encoder domain query token, (1, C).
    pub enc_domain_query: ParamId,
    /// Learned position embedding for the encoder domain-query slot.
    pub enc_domain_query_pos: ParamId,
    /// Decoder domain query token, (1, C).
    pub dec_domain_query: ParamId,
    /// Object queries, (M, C).
    pub object_queries: ParamId,
    /// Learned per-query positions, (M + 1, C); row 0 is the
    /// domain-query slot.
    pub dec_query_pos: ParamId,
}

impl ModelEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        num_levels: usize,
        dim: usize,
        num_queries: usize,
    ) -> Self {
        // Unit-scale init: queries must start well separated or
        // self-attention collapses them and set prediction cannot break
        // symmetry.
        let std = 1.0;
        let level = (0..num_levels)
            .map(|l| store.add(format!("embed.level{l}"), normal_init(rng, std, vec![1, dim])))
            .collect();
        Self {
            level,
            enc_domain_query: store.add(
                "embed.enc_domain_query",
                normal_init(rng, std, vec![1, dim]),
            ),
            enc_domain_query_pos: store.add(
                "embed.enc_domain_query_pos",
                normal_init(rng, std, vec![1, dim]),
            ),
            dec_domain_query: store.add(
                "embed.dec_domain_query",
                normal_init(rng, std, vec![1, dim]),
            ),
            object_queries: store.add(
                "embed.object_queries",
                normal_init(rng, std, vec![num_queries, dim]),
            ),
            dec_query_pos: store.add(
                "embed.dec_query_pos",
                normal_init(rng, std, vec![num_queries + 1, dim]),
            ),
        }
    }
}
