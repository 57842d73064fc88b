//! Detection transformer: convolutional backbone, token sequence
//! construction, encoder/decoder stacks, and per-layer prediction heads.
//!
//! Every decoder layer gets its own prediction head pass (deep
//! supervision), and all intermediate encoder/decoder sequences are
//! retained so the alignment losses can reach each layer.

mod backbone;
mod embed;
mod layers;

pub use backbone::Backbone;
pub use embed::{sinusoidal_table, ModelEmbeddings};
pub use layers::{DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};

use autodiff::{Graph, NodeId, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::CoreError;
use crate::params::{Binding, ParamStore};

/// Token sequence at one transformer layer. When `has_domain_query` is
/// set, token 0 is the domain query.
#[derive(Debug, Clone, Copy)]
pub struct SequenceState {
    pub tokens: NodeId,
    pub has_domain_query: bool,
    /// 0 for the input sequence, 1.. for layer outputs.
    pub layer_index: usize,
}

/// Graph handles for one decoder layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct PredictionNodes {
    /// (M, K+1) row-stochastic class probabilities.
    pub class_probs: NodeId,
    /// (M, 4) boxes as (cx, cy, w, h) in [0, 1].
    pub boxes: NodeId,
}

impl PredictionNodes {
    /// Copies the current values out of the graph.
    pub fn detach(&self, g: &Graph) -> DetectionSet {
        DetectionSet {
            class_probs: g.value(self.class_probs).clone_plain(),
            boxes: g.value(self.boxes).clone_plain(),
        }
    }
}

trait ClonePlain {
    fn clone_plain(&self) -> Tensor;
}

impl ClonePlain for Tensor {
    fn clone_plain(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().to_vec()).expect("tensor shape")
    }
}

/// Plain-value predictions for M object instances.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    /// (M, K+1) probabilities including the background class.
    pub class_probs: Tensor,
    /// (M, 4) boxes as (cx, cy, w, h) relative to the image.
    pub boxes: Tensor,
}

impl DetectionSet {
    pub fn num_instances(&self) -> usize {
        self.class_probs.shape()[0]
    }

    pub fn num_classes_with_background(&self) -> usize {
        self.class_probs.shape()[1]
    }

    pub fn class_row(&self, i: usize) -> &[f64] {
        let k = self.num_classes_with_background();
        &self.class_probs.data()[i * k..(i + 1) * k]
    }

    pub fn box_row(&self, i: usize) -> [f64; 4] {
        let d = &self.boxes.data()[i * 4..(i + 1) * 4];
        [d[0], d[1], d[2], d[3]]
    }
}

/// Full forward pass artifacts for one image.
#[derive(Debug)]
pub struct ForwardPass {
    pub backbone_maps: Vec<NodeId>,
    /// Projected token sequence f_e (N, C) before embeddings are added.
    pub projected_tokens: NodeId,
    pub encoder_states: Vec<SequenceState>,
    pub decoder_states: Vec<SequenceState>,
    /// One prediction set per decoder layer, in layer order.
    pub predictions: Vec<PredictionNodes>,
}

/// The detection transformer with its heads and embeddings.
#[derive(Debug)]
pub struct DetectionModel {
    pub cfg: ModelConfig,
    backbone: Backbone,
    input_proj: Vec<Linear>,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    class_head: Linear,
    box_head: (Linear, Linear, Linear),
    pub embeds: ModelEmbeddings,
    /// Fixed sinusoidal positions for all levels, (N, C).
    pos_table: Tensor,
    level_sizes: Vec<(usize, usize)>,
}

impl DetectionModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self, CoreError> {
        cfg.validate()?;
        let c = cfg.hidden_dim;
        let ffn_hidden = 2 * c;
        let backbone = Backbone::new(store, rng, cfg.num_levels);
        let level_sizes = backbone.level_sizes(cfg.image_size.0, cfg.image_size.1);
        let input_proj = (0..cfg.num_levels)
            .map(|l| {
                Linear::new(
                    store,
                    rng,
                    &format!("proj.level{l}"),
                    backbone.level_channels(l),
                    c,
                )
            })
            .collect();
        let enc_layers = (0..cfg.num_encoder_layers)
            .map(|i| {
                EncoderLayer::new(store, rng, &format!("encoder.layer{i}"), c, cfg.num_heads, ffn_hidden)
            })
            .collect();
        let dec_layers = (0..cfg.num_decoder_layers)
            .map(|i| {
                DecoderLayer::new(store, rng, &format!("decoder.layer{i}"), c, cfg.num_heads, ffn_hidden)
            })
            .collect();
        let class_head = Linear::new(store, rng, "heads.class", c, cfg.num_classes + 1);
        let box_head = (
            Linear::new(store, rng, "heads.box.fc1", c, c),
            Linear::new(store, rng, "heads.box.fc2", c, c),
            Linear::new(store, rng, "heads.box.fc3", c, 4),
        );
        let embeds = ModelEmbeddings::new(store, rng, cfg.num_levels, c, cfg.num_object_queries);

        let tables: Vec<Tensor> = level_sizes
            .iter()
            .map(|&(h, w)| sinusoidal_table(h, w, c))
            .collect();
        let n_total: usize = tables.iter().map(|t| t.shape()[0]).sum();
        let mut pos_data = Vec::with_capacity(n_total * c);
        for t in &tables {
            pos_data.extend_from_slice(t.data());
        }
        let pos_table = Tensor::new(vec![n_total, c], pos_data).expect("pos table");

        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            input_proj,
            enc_layers,
            dec_layers,
            class_head,
            box_head,
            embeds,
            pos_table,
            level_sizes,
        })
    }

    /// Total token count N over all levels.
    pub fn num_tokens(&self) -> usize {
        self.level_sizes.iter().map(|&(h, w)| h * w).sum()
    }

    pub fn level_sizes(&self) -> &[(usize, usize)] {
        &self.level_sizes
    }

    /// Runs the backbone on an image tensor, returning one map per level.
    pub fn backbone_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: &Tensor,
    ) -> Result<Vec<NodeId>, CoreError> {
        let img = g.constant(Tensor::new(image.shape().to_vec(), image.data().to_vec()).expect("image"));
        self.backbone.forward(g, bind, img)
    }

    /// Flattens, projects, and embeds the feature maps into the encoder
    /// input sequence z_0 = [domain query; tokens] + positions + levels.
    /// Returns the input state, the raw projected tokens f_e, and the
    /// position table that also conditions every encoder layer.
    pub fn build_encoder_input(
        &self,
        g: &mut Graph,
        bind: &Binding,
        features: &[NodeId],
        with_domain_query: bool,
    ) -> Result<(SequenceState, NodeId, NodeId), CoreError> {
        let c = self.cfg.hidden_dim;
        let mut level_tokens = Vec::with_capacity(features.len());
        let mut level_embeds = Vec::with_capacity(features.len());
        for (l, &fmap) in features.iter().enumerate() {
            let shape = g.shape(fmap).to_vec();
            let (ch, h, w) = (shape[0], shape[1], shape[2]);
            let flat = g.reshape(fmap, vec![ch, h * w])?;
            let tokens_raw = g.transpose(flat)?;
            let projected = self.input_proj[l].forward(g, bind, tokens_raw)?;
            level_tokens.push(projected);
            let ones = g.constant(Tensor::full(vec![h * w, 1], 1.0));
            let lvl = g.matmul(ones, bind.node(self.embeds.level[l]))?;
            level_embeds.push(lvl);
        }
        let f_e = g.concat(&level_tokens, 0)?;
        let e_level = g.concat(&level_embeds, 0)?;
        let e_pos = g.constant(self.pos_table.clone());

        let (tokens, e_pos_full, e_level_full) = if with_domain_query {
            let dq = bind.node(self.embeds.enc_domain_query);
            let tokens = g.concat(&[dq, f_e], 0)?;
            let dq_pos = bind.node(self.embeds.enc_domain_query_pos);
            let pos = g.concat(&[dq_pos, e_pos], 0)?;
            let zero_row = g.constant(Tensor::zeros(vec![1, c]));
            let lvl = g.concat(&[zero_row, e_level], 0)?;
            (tokens, pos, lvl)
        } else {
            (f_e, e_pos, e_level)
        };
        let with_pos = g.add(tokens, e_pos_full)?;
        let z0 = g.add(with_pos, e_level_full)?;
        Ok((
            SequenceState {
                tokens: z0,
                has_domain_query: with_domain_query,
                layer_index: 0,
            },
            f_e,
            e_pos_full,
        ))
    }

    /// Runs the encoder stack, retaining every layer output. Every layer
    /// receives the position table again as its query/key conditioning.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        z0: &SequenceState,
        positions: NodeId,
    ) -> Result<Vec<SequenceState>, CoreError> {
        let mut states = Vec::with_capacity(self.enc_layers.len());
        let mut x = z0.tokens;
        for (i, layer) in self.enc_layers.iter().enumerate() {
            x = layer.forward(g, bind, x, positions)?;
            states.push(SequenceState {
                tokens: x,
                has_domain_query: z0.has_domain_query,
                layer_index: i + 1,
            });
        }
        Ok(states)
    }

    /// Builds the decoder input q_0 = [domain query; object queries] + positions.
    /// Returns the state and the per-query position rows that also
    /// condition every decoder layer.
    pub fn build_decoder_input(
        &self,
        g: &mut Graph,
        bind: &Binding,
        with_domain_query: bool,
    ) -> Result<(SequenceState, NodeId), CoreError> {
        let obj = bind.node(self.embeds.object_queries);
        let pos = bind.node(self.embeds.dec_query_pos);
        let (tokens, positions) = if with_domain_query {
            let dq = bind.node(self.embeds.dec_domain_query);
            let seq = g.concat(&[dq, obj], 0)?;
            (g.add(seq, pos)?, pos)
        } else {
            let m = self.cfg.num_object_queries;
            let pos_tail = g.slice(pos, 0, 1, m)?;
            (g.add(obj, pos_tail)?, pos_tail)
        };
        Ok((
            SequenceState {
                tokens,
                has_domain_query: with_domain_query,
                layer_index: 0,
            },
            positions,
        ))
    }

    /// Runs the decoder stack against the final encoder memory. The
    /// encoder's domain-query token is excluded from cross-attention keys
    /// so the detection path is identical with and without alignment.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        q0: &SequenceState,
        query_pos: NodeId,
        memory: &SequenceState,
    ) -> Result<Vec<SequenceState>, CoreError> {
        let mem_tokens = if memory.has_domain_query {
            let n = g.shape(memory.tokens)[0] - 1;
            g.slice(memory.tokens, 0, 1, n)?
        } else {
            memory.tokens
        };
        let mem_pos = g.constant(self.pos_table.clone());
        let mut states = Vec::with_capacity(self.dec_layers.len());
        let mut x = q0.tokens;
        for (i, layer) in self.dec_layers.iter().enumerate() {
            x = layer.forward(g, bind, x, query_pos, mem_tokens, mem_pos)?;
            states.push(SequenceState {
                tokens: x,
                has_domain_query: q0.has_domain_query,
                layer_index: i + 1,
            });
        }
        Ok(states)
    }

    /// Prediction heads over the M object-query slots of one decoder
    /// layer; the domain-query slot is stripped first.
    pub fn predict(
        &self,
        g: &mut Graph,
        bind: &Binding,
        state: &SequenceState,
    ) -> Result<PredictionNodes, CoreError> {
        let m = self.cfg.num_object_queries;
        let q = if state.has_domain_query {
            g.slice(state.tokens, 0, 1, m)?
        } else {
            state.tokens
        };
        let logits = self.class_head.forward(g, bind, q)?;
        let class_probs = g.softmax(logits)?;
        let h = self.box_head.0.forward(g, bind, q)?;
        let h = g.relu(h);
        let h = self.box_head.1.forward(g, bind, h)?;
        let h = g.relu(h);
        let raw = self.box_head.2.forward(g, bind, h)?;
        let boxes = g.sigmoid(raw);
        Ok(PredictionNodes { class_probs, boxes })
    }

    /// Full forward pass: backbone, encoder, decoder, and per-layer heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: &Tensor,
        with_domain_query: bool,
    ) -> Result<ForwardPass, CoreError> {
        let backbone_maps = self.backbone_forward(g, bind, image)?;
        let (z0, projected, positions) =
            self.build_encoder_input(g, bind, &backbone_maps, with_domain_query)?;
        let encoder_states = self.encoder_forward(g, bind, &z0, positions)?;
        let (q0, query_pos) = self.build_decoder_input(g, bind, with_domain_query)?;
        let memory = encoder_states.last().expect("at least one encoder layer");
        let decoder_states = self.decoder_forward(g, bind, &q0, query_pos, memory)?;
        let predictions = decoder_states
            .iter()
            .map(|s| self.predict(g, bind, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ForwardPass {
            backbone_maps,
            projected_tokens: projected,
            encoder_states,
            decoder_states,
            predictions,
        })
    }
}
