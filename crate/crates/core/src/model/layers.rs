//! Shared neural building blocks: affine maps, layer norm, attention.

use autodiff::{Graph, NodeId, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::params::{xavier_uniform, Binding, ParamId, ParamStore};

/// Affine map `x W + b` applied to the rows of a `(rows, in_dim)` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, in_dim, out_dim, vec![in_dim, out_dim]),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId, CoreError> {
        let h = g.matmul(x, bind.node(self.w))?;
        Ok(g.add(h, bind.node(self.b))?)
    }
}

/// Learned gain and bias for layer normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId, CoreError> {
        Ok(g.layer_norm(x, bind.node(self.gain), bind.node(self.bias))?)
    }
}

/// Multi-head scaled dot-product attention over full sequences. Every
/// query position attends to every key position.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
    ) -> Self {
        debug_assert_eq!(dim % num_heads, 0);
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            num_heads,
            head_dim: dim / num_heads,
        }
    }

    /// queries: (Tq, C); keys/values: (Tk, C). Returns (Tq, C).
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
    ) -> Result<NodeId, CoreError> {
        let q = self.q.forward(g, bind, queries)?;
        let k = self.k.forward(g, bind, keys)?;
        let v = self.v.forward(g, bind, values)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let off = h * self.head_dim;
            let qh = g.slice(q, 1, off, self.head_dim)?;
            let kh = g.slice(k, 1, off, self.head_dim)?;
            let vh = g.slice(v, 1, off, self.head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores)?;
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat(&head_outputs, 1)?;
        self.o.forward(g, bind, merged)
    }
}

/// Two-layer feed-forward block with a rectifier in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId, CoreError> {
        let h = self.fc1.forward(g, bind, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, bind, h)
    }
}

/// Post-norm transformer encoder layer: self-attention then feed-forward,
/// each wrapped in residual + layer norm. Positions re-enter every layer
/// as additions to queries and keys; values carry content only.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, num_heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        pos: NodeId,
    ) -> Result<NodeId, CoreError> {
        let qk = g.add(x, pos)?;
        let a = self.attn.forward(g, bind, qk, qk, x)?;
        let r = g.add(x, a)?;
        let h = self.norm1.forward(g, bind, r)?;
        let f = self.ffn.forward(g, bind, h)?;
        let r2 = g.add(h, f)?;
        self.norm2.forward(g, bind, r2)
    }
}

/// Post-norm transformer decoder layer: self-attention over the query
/// sequence, cross-attention into the encoder memory, then feed-forward.
/// Query positions condition both attentions; memory positions condition
/// the cross-attention keys.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), dim, num_heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), dim, num_heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        query_pos: NodeId,
        memory: NodeId,
        memory_pos: NodeId,
    ) -> Result<NodeId, CoreError> {
        let qk = g.add(x, query_pos)?;
        let a = self.self_attn.forward(g, bind, qk, qk, x)?;
        let r = g.add(x, a)?;
        let h = self.norm1.forward(g, bind, r)?;
        let q2 = g.add(h, query_pos)?;
        let mem_k = g.add(memory, memory_pos)?;
        let c = self.cross_attn.forward(g, bind, q2, mem_k, memory)?;
        let r2 = g.add(h, c)?;
        let h2 = self.norm2.forward(g, bind, r2)?;
        let f = self.ffn.forward(g, bind, h2)?;
        let r3 = g.add(h2, f)?;
        self.norm3.forward(g, bind, r3)
    }
}
