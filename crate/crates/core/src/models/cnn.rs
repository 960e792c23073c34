use crate::autodiff::{Graph, Tensor};

use super::layers::{BatchNorm, ChannelEmbedding, Conv, Init, LayerNorm, Linear, Pass};
use super::params::{Binding, ParamStore};
use super::{Heads, ModelError, ModelKind, ModelSpec, Norm};

#[derive(Debug, Clone)]
enum NormLayer {
    Batch(BatchNorm),
    Layer(LayerNorm),
    None,
}

/// Two stride-2 convolutions, an optional residual 3×3 block, then linear
/// heads. Serves as both critic and classifier.
#[derive(Debug, Clone)]
pub(crate) struct CnnNet {
    label: Option<ChannelEmbedding>,
    conv1: Conv,
    conv2: Conv,
    norm: NormLayer,
    residual: Option<Conv>,
    hidden: Option<Linear>,
    adv: Option<Linear>,
    class: Option<Linear>,
    flat: usize,
}

impl CnnNet {
    pub fn new(init: &mut Init, s: &ModelSpec) -> Self {
        let w = s.width;
        let q = s.image_size / 4;
        let cin = s.channels + usize::from(s.label_channel);
        let label = s
            .label_channel
            .then(|| ChannelEmbedding::new(init, "label_embed", s.num_classes, s.image_size, 0.0));
        let conv1 = Conv::new(init, "conv1", cin, w, 4, 2, 1, true);
        let conv2 = Conv::new(init, "conv2", w, 2 * w, 4, 2, 1, s.norm != Norm::Batch);
        let norm = match s.norm {
            Norm::Batch => NormLayer::Batch(BatchNorm::new(init, "norm2", 2 * w)),
            Norm::Layer => NormLayer::Layer(LayerNorm::new(init, "norm2", &[2 * w, q, q])),
            Norm::None => NormLayer::None,
        };
        let residual = s.residual.then(|| Conv::new(init, "res", 2 * w, 2 * w, 3, 1, 1, true));
        let flat = 2 * w * q * q;
        let classifier = s.kind == ModelKind::ClassifierCnn;
        let hidden = classifier.then(|| Linear::new(init, "hidden", flat, s.feature_dim));
        let head_in = if classifier { s.feature_dim } else { flat };
        let adv = (!classifier).then(|| Linear::new(init, "adv_head", head_in, 1));
        let class = (classifier || s.acgan_head).then(|| Linear::new(init, "class_head", head_in, s.num_classes));
        CnnNet {
            label,
            conv1,
            conv2,
            norm,
            residual,
            hidden,
            adv,
            class,
            flat,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        matches!(self.norm, NormLayer::Batch(_))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        pass: &mut Pass,
        x: Tensor,
        labels: &[usize],
    ) -> Result<Heads, ModelError> {
        let n = g.shape(x)[0];
        let mut h = x;
        if let Some(emb) = &self.label {
            check_batch(labels, n)?;
            let e = emb.lookup(g, p, labels)?;
            h = g.concat(&[h, e], 1)?;
        }
        let h = self.conv1.forward(g, p, h)?;
        let h = g.leaky_relu(h, 0.2);
        let h = self.conv2.forward(g, p, h)?;
        let h = match &self.norm {
            NormLayer::Batch(bn) => bn.forward(g, p, store, pass, h)?,
            NormLayer::Layer(ln) => ln.forward(g, p, h)?,
            NormLayer::None => h,
        };
        let mut h = g.leaky_relu(h, 0.2);
        if let Some(res) = &self.residual {
            let r = res.forward(g, p, h)?;
            let r = g.leaky_relu(r, 0.2);
            h = g.add(h, r)?;
        }
        let mut f = g.reshape(h, &[n, self.flat])?;
        if let Some(hidden) = &self.hidden {
            let z = hidden.forward(g, p, f)?;
            f = g.leaky_relu(z, 0.2);
        }
        let score = match &self.adv {
            Some(head) => {
                let s = head.forward(g, p, f)?;
                Some(g.reshape(s, &[n])?)
            }
            None => None,
        };
        let class_logits = match &self.class {
            Some(head) => Some(head.forward(g, p, f)?),
            None => None,
        };
        Ok(Heads {
            score,
            class_logits,
            features: f,
        })
    }
}

pub(crate) fn check_batch(labels: &[usize], n: usize) -> Result<(), ModelError> {
    if labels.len() != n {
        return Err(ModelError::InvalidInput(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    Ok(())
}
