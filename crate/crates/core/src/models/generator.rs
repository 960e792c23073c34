use crate::autodiff::{Graph, Tensor};

use super::layers::{BatchNorm, ChannelEmbedding, Conv, Init, Linear, Pass};
use super::params::{Binding, ParamStore};
use super::{ModelError, ModelSpec};

/// Noise is projected to `width` maps at half resolution and upsampled; each
/// map is then multiplied by the class's embedding channel before three 3×3
/// convolution stages. The output passes through a sigmoid.
#[derive(Debug, Clone)]
pub(crate) struct GeneratorNet {
    proj: Linear,
    embed: ChannelEmbedding,
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    conv3: Conv,
    width: usize,
    half: usize,
    dropout: f64,
}

impl GeneratorNet {
    pub fn new(init: &mut Init, s: &ModelSpec) -> Self {
        let half = s.image_size / 2;
        let w = s.width;
        GeneratorNet {
            proj: Linear::new(init, "proj", s.latent_dim, w * half * half),
            embed: ChannelEmbedding::new(init, "class_embed", s.num_classes, s.image_size, 1.0),
            conv1: Conv::new(init, "conv1", w, w, 3, 1, 1, false),
            bn1: BatchNorm::new(init, "bn1", w),
            conv2: Conv::new(init, "conv2", w, w, 3, 1, 1, false),
            bn2: BatchNorm::new(init, "bn2", w),
            conv3: Conv::new(init, "conv3", w, s.channels, 3, 1, 1, true),
            width: w,
            half,
            dropout: s.dropout,
        }
    }

    pub fn embed(&self) -> &ChannelEmbedding {
        &self.embed
    }

    /// `labels = None` skips the class-embedding product.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        pass: &mut Pass,
        noise: Tensor,
        labels: Option<&[usize]>,
    ) -> Result<Tensor, ModelError> {
        let n = g.shape(noise)[0];
        let h = self.proj.forward(g, p, noise)?;
        let h = g.reshape(h, &[n, self.width, self.half, self.half])?;
        let mut h = g.upsample_nearest(h, 2)?;
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(ModelError::InvalidInput(format!(
                    "{} labels for a batch of {n}",
                    labels.len()
                )));
            }
            let e = self.embed.lookup(g, p, labels)?;
            h = g.channel_mul(h, e)?;
        }
        let h = self.conv1.forward(g, p, h)?;
        let h = self.bn1.forward(g, p, store, pass, h)?;
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv2.forward(g, p, h)?;
        let h = self.bn2.forward(g, p, store, pass, h)?;
        let h = g.leaky_relu(h, 0.2);
        let h = pass.dropout(g, h, self.dropout)?;
        let h = self.conv3.forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }
}
