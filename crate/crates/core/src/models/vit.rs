use crate::autodiff::{Graph, Tensor};

use super::cnn::check_batch;
use super::layers::{ChannelEmbedding, Conv, Init, LayerNorm, Linear, Pass, INIT_STD};
use super::params::{Binding, ParamId};
use super::{Heads, ModelError, ModelKind, ModelSpec};

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer encoder over patch tokens plus a class token.
#[derive(Debug, Clone)]
pub(crate) struct VitNet {
    label: Option<ChannelEmbedding>,
    patch: Conv,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    hidden: Option<Linear>,
    adv: Option<Linear>,
    class: Option<Linear>,
    dim: usize,
    heads: usize,
    seq: usize,
}

pub fn seq_len(image_size: usize, patch: usize) -> usize {
    (image_size / patch).pow(2) + 1
}

impl VitNet {
    pub fn new(init: &mut Init, s: &ModelSpec) -> Self {
        let d = s.width;
        let seq = seq_len(s.image_size, s.patch);
        let cin = s.channels + usize::from(s.label_channel);
        let label = s
            .label_channel
            .then(|| ChannelEmbedding::new(init, "label_embed", s.num_classes, s.image_size, 0.0));
        let patch = Conv::new(init, "patch", cin, d, s.patch, s.patch, 0, true);
        let cls = init.normal("cls_token", &[1, 1, d], 0.0, INIT_STD);
        let pos = init.normal("pos_embed", &[1, seq, d], 0.0, INIT_STD);
        let blocks = (0..s.depth)
            .map(|i| {
                let name = |part: &str| format!("block{i}.{part}");
                Block {
                    ln1: LayerNorm::new(init, &name("ln1"), &[d]),
                    qkv: Linear::new(init, &name("qkv"), d, 3 * d),
                    proj: Linear::new(init, &name("proj"), d, d),
                    ln2: LayerNorm::new(init, &name("ln2"), &[d]),
                    fc1: Linear::new(init, &name("fc1"), d, 2 * d),
                    fc2: Linear::new(init, &name("fc2"), 2 * d, d),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(init, "final_ln", &[d]);
        let classifier = s.kind == ModelKind::ClassifierVit;
        let hidden = classifier.then(|| Linear::new(init, "hidden", d, s.feature_dim));
        let head_in = if classifier { s.feature_dim } else { d };
        let adv = (!classifier).then(|| Linear::new(init, "adv_head", head_in, 1));
        let class = (classifier || s.acgan_head).then(|| Linear::new(init, "class_head", head_in, s.num_classes));
        VitNet {
            label,
            patch,
            cls,
            pos,
            blocks,
            final_ln,
            hidden,
            adv,
            class,
            dim: d,
            heads: s.heads,
            seq,
        }
    }

    fn attention(&self, g: &mut Graph, p: &Binding, blk: &Block, x: Tensor, n: usize) -> Result<Tensor, ModelError> {
        let (t, d, h) = (self.seq, self.dim, self.heads);
        let dh = d / h;
        let flat = g.reshape(x, &[n * t, d])?;
        let qkv = blk.qkv.forward(g, p, flat)?;
        let qkv = g.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let s = g.slice(qkv, 0, i, 1)?;
            parts.push(g.reshape(s, &[n * h, t, dh])?);
        }
        let scores = g.matmul_t(parts[0], parts[1], false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores)?;
        let out = g.matmul(att, parts[2])?;
        let out = g.reshape(out, &[n, h, t, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n * t, d])?;
        let out = blk.proj.forward(g, p, out)?;
        Ok(g.reshape(out, &[n, t, d])?)
    }

    fn mlp(&self, g: &mut Graph, p: &Binding, blk: &Block, x: Tensor, n: usize) -> Result<Tensor, ModelError> {
        let flat = g.reshape(x, &[n * self.seq, self.dim])?;
        let h = blk.fc1.forward(g, p, flat)?;
        let h = g.gelu(h);
        let h = blk.fc2.forward(g, p, h)?;
        Ok(g.reshape(h, &[n, self.seq, self.dim])?)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        _pass: &mut Pass,
        x: Tensor,
        labels: &[usize],
    ) -> Result<Heads, ModelError> {
        let n = g.shape(x)[0];
        let d = self.dim;
        let mut h = x;
        if let Some(emb) = &self.label {
            check_batch(labels, n)?;
            let e = emb.lookup(g, p, labels)?;
            h = g.concat(&[h, e], 1)?;
        }
        let tokens = self.patch.forward(g, p, h)?;
        let tokens = g.reshape(tokens, &[n, d, self.seq - 1])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let cls = g.broadcast_to(p.get(self.cls), &[n, 1, d])?;
        let h = g.concat(&[cls, tokens], 1)?;
        let mut h = g.add(h, p.get(self.pos))?;
        for blk in &self.blocks {
            let a = blk.ln1.forward(g, p, h)?;
            let a = self.attention(g, p, blk, a, n)?;
            h = g.add(h, a)?;
            let m = blk.ln2.forward(g, p, h)?;
            let m = self.mlp(g, p, blk, m, n)?;
            h = g.add(h, m)?;
        }
        let h = self.final_ln.forward(g, p, h)?;
        let c = g.slice(h, 1, 0, 1)?;
        let mut f = g.reshape(c, &[n, d])?;
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
