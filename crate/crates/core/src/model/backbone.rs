//! Small convolutional backbone trained from scratch.
//!
//! A four-convolution stem with total stride 4 produces the first feature
//! level; each additional level halves the resolution with one more
//! stride-2 convolution.

use autodiff::{conv_out_dim, Graph, NodeId, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::params::{he_normal, Binding, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * 9;
        let w = store.add(
            format!("{name}.weight"),
            he_normal(rng, fan_in, vec![cout, cin, 3, 3]),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self { w, b, stride }
    }
}

/// Stem channels. The stem output width is also the channel count of
/// every extra pyramid level.
const STEM: [(usize, usize, usize); 4] = [(3, 32, 2), (32, 32, 2), (32, 64, 1), (64, 64, 1)];

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Vec<ConvBlock>,
    extra: Vec<ConvBlock>,
    num_levels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, num_levels: usize) -> Self {
        let stem = STEM
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                ConvBlock::new(store, rng, &format!("backbone.conv{i}"), cin, cout, stride)
            })
            .collect();
        let extra = (1..num_levels)
            .map(|l| {
                ConvBlock::new(store, rng, &format!("backbone.level{l}"), 64, 64, 2)
            })
            .collect();
        Self {
            stem,
            extra,
            num_levels,
        }
    }

    /// Channel count of level `l` (all levels share the stem width).
    pub fn level_channels(&self, _level: usize) -> usize {
        64
    }

    /// Spatial sizes of every level for a given input size.
    pub fn level_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut h = height;
        let mut w = width;
        for block in &self.stem {
            h = conv_out_dim(h, 3, block.stride, 1);
            w = conv_out_dim(w, 3, block.stride, 1);
        }
        let mut sizes = vec![(h, w)];
        for _ in &self.extra {
            h = conv_out_dim(h, 3, 2, 1);
            w = conv_out_dim(w, 3, 2, 1);
            sizes.push((h, w));
        }
        sizes
    }

    /// Runs the backbone on a (3, H, W) image node, returning one feature
    /// map node per level.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: NodeId,
    ) -> Result<Vec<NodeId>, CoreError> {
        let shape = g.shape(image).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let min = 1usize << self.num_levels;
        if h < min || w < min {
            return Err(CoreError::ImageTooSmall {
                height: h,
                width: w,
                levels: self.num_levels,
                min,
            });
        }
        let mut x = image;
        for block in &self.stem {
            x = g.conv2d(x, bind.node(block.w), bind.node(block.b), block.stride, 1)?;
            x = g.relu(x);
        }
        let mut levels = vec![x];
        for block in &self.extra {
            x = g.conv2d(x, bind.node(block.w), bind.node(block.b), block.stride, 1)?;
            x = g.relu(x);
            levels.push(x);
        }
        Ok(levels)
    }
}
