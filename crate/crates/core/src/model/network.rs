//! Forward computation of the network on a [`GradientTape`].

use super::config::ModelConfig;
use super::params::{AlifuseParams, AttentionIds, BlockIds, Bound, CrossIds, NormIds, ParamId};
use crate::data::{PatchGrid, TokenSequence, MASK_ID};
use crate::error::{Error, Result};
use crate::tensor::{GradientTape, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Head-averaged attention weights, one `[queries × keys]` matrix per block.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecorder {
    pub layers: Vec<Tensor>,
}

/// Parameters bound to one tape.
pub struct Network<'p> {
    params: &'p AlifuseParams,
    bound: Bound,
}

/// Per-sample tensors of one training pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Unimodal image features, `[(P+1) × d]`, row 0 is `[CLS]`.
    pub z_image: Var,
    /// Unimodal text features, `[L_max × d]`, row 0 is `[CLS]`.
    pub z_text: Var,
    pub z_image_cls: Var,
    pub z_text_cls: Var,
    pub grounded_image: Var,
    pub grounded_text: Var,
    /// `[P × V]`; row `i` reconstructs patch `i`.
    pub recon_image: Var,
    /// `[L_max × vocab]`; row `i` predicts the token at position `i`.
    pub recon_text_logits: Var,
    /// `[1 × n_classes]`.
    pub class_logits: Var,
    /// Masked patch indices (rows of `recon_image`), ascending.
    pub image_masked: Vec<usize>,
    /// Masked token positions (rows of `recon_text_logits`), ascending.
    pub text_masked: Vec<usize>,
    /// Rows scored by the image reconstruction loss.
    pub image_loss_rows: Vec<usize>,
    /// Rows scored by the text reconstruction loss.
    pub text_loss_rows: Vec<usize>,
}

/// `floor(ratio * n)` distinct entries of `candidates`, in ascending order.
pub fn sample_mask(candidates: &[usize], ratio: f64, rng: &mut RngStream) -> Vec<usize> {
    let k = (ratio * candidates.len() as f64).floor() as usize;
    let mut picked: Vec<usize> = rng.choose(candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}

/// Image rows that may be masked: every patch row, never `[CLS]`.
pub fn image_maskable(num_patches: usize) -> Vec<usize> {
    (1..=num_patches).collect()
}

/// Text rows that may be masked: real tokens after `[CLS]`.
pub fn text_maskable(tokens: &TokenSequence) -> Vec<usize> {
    (1..tokens.length).collect()
}

impl<'p> Network<'p> {
    pub fn bind(params: &'p AlifuseParams, tape: &mut GradientTape) -> Self {
        Network { params, bound: params.bind(tape) }
    }

    pub fn bind_frozen(params: &'p AlifuseParams, tape: &mut GradientTape) -> Self {
        Network { params, bound: params.bind_frozen(tape) }
    }

    /// Uses an existing binding, e.g. one sliced from a flat leaf.
    pub fn with_bound(params: &'p AlifuseParams, bound: Bound) -> Self {
        Network { params, bound }
    }

    pub fn params(&self) -> &AlifuseParams {
        self.params
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    fn v(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn embed_image(&self, tape: &mut GradientTape, grid: &PatchGrid) -> Result<Var> {
        let c = self.config();
        let l = self.params.layout();
        let expected = [c.num_patches(), c.patch_voxels()];
        if grid.patches.shape() != expected {
            return Err(Error::dim(format!("patch grid {:?}, model expects {expected:?}", grid.patches.shape())));
        }
        let x = tape.constant(grid.patches.clone());
        let lp = tape.linear(x, self.v(l.image_proj.w), Some(self.v(l.image_proj.b)))?;
        let seq = tape.concat_rows(&[self.v(l.image_cls), lp])?;
        tape.add(seq, self.v(l.image_pos))
    }

    pub fn embed_text(&self, tape: &mut GradientTape, tokens: &TokenSequence) -> Result<Var> {
        let c = self.config();
        let l = self.params.layout();
        if tokens.ids.len() != c.max_len || tokens.pad_mask.len() != c.max_len {
            return Err(Error::dim(format!("token sequence of {}, model expects {}", tokens.ids.len(), c.max_len)));
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Vocab { id, size: c.vocab_size });
        }
        let rows = tape.gather_rows(self.v(l.text_tok), &tokens.ids)?;
        tape.add(rows, self.v(l.text_pos))
    }

    /// Replaces rows `masked` of `h` with the modality's `[MASK]` embedding
    /// plus that row's position embedding.
    pub fn apply_mask(&self, tape: &mut GradientTape, modality: Modality, h: Var, masked: &[usize]) -> Result<Var> {
        if masked.is_empty() {
            return Ok(h);
        }
        let l = self.params.layout();
        let n = tape.shape(h)[0];
        if masked.iter().any(|&i| i == 0 || i >= n) {
            return Err(Error::Contract("mask must avoid [CLS] and stay in range".into()));
        }
        let (mask_emb, pos) = match modality {
            Modality::Image => (self.v(l.image_mask), self.v(l.image_pos)),
            Modality::Text => (tape.gather_rows(self.v(l.text_tok), &[MASK_ID])?, self.v(l.text_pos)),
        };
        let mask_pos = tape.gather_rows(pos, masked)?;
        let replacement = tape.add_row(mask_pos, mask_emb)?;
        let table = tape.concat_rows(&[h, replacement])?;
        let mut idx: Vec<usize> = (0..n).collect();
        for (j, &i) in masked.iter().enumerate() {
            idx[i] = n + j;
        }
        tape.gather_rows(table, &idx)
    }

    fn norm(&self, tape: &mut GradientTape, x: Var, ids: &NormIds) -> Result<Var> {
        tape.layer_norm(x, self.v(ids.gamma), self.v(ids.beta), self.config().ln_eps)
    }

    fn attention(
        &self,
        tape: &mut GradientTape,
        ids: &AttentionIds,
        queries: Var,
        keys: Var,
        keep: &[bool],
        rec: Option<&mut AttentionRecorder>,
    ) -> Result<Var> {
        let c = self.config();
        let (heads, dh) = (c.n_heads, c.head_dim());
        let q = tape.linear(queries, self.v(ids.q.w), Some(self.v(ids.q.b)))?;
        let k = tape.linear(keys, self.v(ids.k), None)?;
        let v = tape.linear(keys, self.v(ids.v.w), Some(self.v(ids.v.b)))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut avg: Option<Tensor> = None;
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.masked_softmax_rows(scores, keep)?;
            if rec.is_some() {
                let w = tape.value(weights);
                avg = Some(match avg {
                    None => w.clone(),
                    Some(mut a) => {
                        a.data_mut().iter_mut().zip(w.data()).for_each(|(x, y)| *x += y);
                        a
                    }
                });
            }
            outs.push(tape.matmul(weights, vh)?);
        }
        if let (Some(rec), Some(a)) = (rec, avg) {
            rec.layers.push(a.map(|x| x / heads as f64));
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        tape.linear(merged, self.v(ids.o.w), Some(self.v(ids.o.b)))
    }

    fn feed_forward(&self, tape: &mut GradientTape, b: &BlockIds, x: Var) -> Result<Var> {
        let f = self.norm(tape, x, &b.norm2)?;
        let f = tape.linear(f, self.v(b.fc1.w), Some(self.v(b.fc1.b)))?;
        let f = tape.gelu(f)?;
        let f = tape.linear(f, self.v(b.fc2.w), Some(self.v(b.fc2.b)))?;
        tape.add(x, f)
    }

    fn self_attention(
        &self,
        tape: &mut GradientTape,
        b: &BlockIds,
        x: Var,
        keep: &[bool],
        rec: Option<&mut AttentionRecorder>,
    ) -> Result<Var> {
        let a = self.norm(tape, x, &b.norm1)?;
        let a = self.attention(tape, &b.attn, a, a, keep, rec)?;
        tape.add(x, a)
    }

    fn cross_attention(
        &self,
        tape: &mut GradientTape,
        ca: &CrossIds,
        x: Var,
        other: Var,
        other_keep: &[bool],
    ) -> Result<Var> {
        let a = self.norm(tape, x, &ca.norm)?;
        let a = self.attention(tape, &ca.attn, a, other, other_keep, None)?;
        tape.add(x, a)
    }

    fn stack(&self, modality: Modality) -> &[BlockIds] {
        let l = self.params.layout();
        match modality {
            Modality::Image => &l.image_enc,
            Modality::Text => &l.text_enc,
        }
    }

    /// Self-attention and FFN blocks; keys with `keep == false` get no weight.
    pub fn encode_unimodal(
        &self,
        tape: &mut GradientTape,
        modality: Modality,
        h: Var,
        keep: &[bool],
        mut rec: Option<&mut AttentionRecorder>,
    ) -> Result<Var> {
        let mut x = h;
        for b in self.stack(modality) {
            x = self.self_attention(tape, b, x, keep, rec.as_deref_mut())?;
            x = self.feed_forward(tape, b, x)?;
        }
        Ok(x)
    }

    /// The unimodal blocks with a cross-attention layer over `other`
    /// inserted between self-attention and FFN.
    pub fn encode_grounded(
        &self,
        tape: &mut GradientTape,
        modality: Modality,
        h: Var,
        keep: &[bool],
        other: Var,
        other_keep: &[bool],
    ) -> Result<Var> {
        let l = self.params.layout();
        let cross = match modality {
            Modality::Image => &l.image_cross,
            Modality::Text => &l.text_cross,
        };
        let mut x = h;
        for (b, ca) in self.stack(modality).iter().zip(cross) {
            x = self.self_attention(tape, b, x, keep, None)?;
            x = self.cross_attention(tape, ca, x, other, other_keep)?;
            x = self.feed_forward(tape, b, x)?;
        }
        Ok(x)
    }

    /// Image reconstruction `[P × V]`; the `[CLS]` row is dropped before the head.
    pub fn decode_image(&self, tape: &mut GradientTape, z: Var) -> Result<Var> {
        let l = self.params.layout();
        let n = tape.shape(z)[0];
        let keep = vec![true; n];
        let mut x = z;
        for b in &l.image_dec {
            x = self.self_attention(tape, b, x, &keep, None)?;
            x = self.feed_forward(tape, b, x)?;
        }
        let patches: Vec<usize> = (1..n).collect();
        let x = tape.gather_rows(x, &patches)?;
        tape.linear(x, self.v(l.image_head.w), Some(self.v(l.image_head.b)))
    }

    /// Token logits `[L_max × vocab]`.
    pub fn decode_text(&self, tape: &mut GradientTape, z: Var, keep: &[bool]) -> Result<Var> {
        let l = self.params.layout();
        let mut x = z;
        for b in &l.text_dec {
            x = self.self_attention(tape, b, x, keep, None)?;
            x = self.feed_forward(tape, b, x)?;
        }
        tape.linear(x, self.v(l.text_head.w), Some(self.v(l.text_head.b)))
    }

    /// Two-layer ReLU MLP on `[z_image_cls, z_text_cls]`.
    pub fn fuse_classify(&self, tape: &mut GradientTape, z_image_cls: Var, z_text_cls: Var) -> Result<Var> {
        let l = self.params.layout();
        let joint = tape.concat_cols(&[z_image_cls, z_text_cls])?;
        let hdn = tape.linear(joint, self.v(l.fusion_fc1.w), Some(self.v(l.fusion_fc1.b)))?;
        let hdn = tape.relu(hdn)?;
        tape.linear(hdn, self.v(l.fusion_fc2.w), Some(self.v(l.fusion_fc2.b)))
    }

    pub fn log_tau(&self) -> Var {
        self.v(self.params.layout().log_tau)
    }

    /// Unmasked unimodal features and their `[CLS]` rows.
    pub fn encode_pair(
        &self,
        tape: &mut GradientTape,
        image: &PatchGrid,
        text: &TokenSequence,
    ) -> Result<(Var, Var, Var, Var)> {
        let h_i = self.embed_image(tape, image)?;
        let h_t = self.embed_text(tape, text)?;
        let keep_i = vec![true; tape.shape(h_i)[0]];
        let z_i = self.encode_unimodal(tape, Modality::Image, h_i, &keep_i, None)?;
        let z_t = self.encode_unimodal(tape, Modality::Text, h_t, &text.pad_mask, None)?;
        let zi_cls = tape.gather_rows(z_i, &[0])?;
        let zt_cls = tape.gather_rows(z_t, &[0])?;
        Ok((z_i, z_t, zi_cls, zt_cls))
    }

    /// Unimodal pass for contrastive alignment and fusion, then the masked
    /// grounded pass for both reconstructions.
    pub fn forward_training_pass(
        &self,
        tape: &mut GradientTape,
        image: &PatchGrid,
        text: &TokenSequence,
        rng: &mut RngStream,
    ) -> Result<ForwardOutputs> {
        let c = self.config();
        let h_i = self.embed_image(tape, image)?;
        let h_t = self.embed_text(tape, text)?;
        let keep_i = vec![true; tape.shape(h_i)[0]];
        let keep_t = &text.pad_mask;

        let z_image = self.encode_unimodal(tape, Modality::Image, h_i, &keep_i, None)?;
        let z_text = self.encode_unimodal(tape, Modality::Text, h_t, keep_t, None)?;
        let z_image_cls = tape.gather_rows(z_image, &[0])?;
        let z_text_cls = tape.gather_rows(z_text, &[0])?;
        let class_logits = self.fuse_classify(tape, z_image_cls, z_text_cls)?;

        let image_cand = image_maskable(c.num_patches());
        let text_cand = text_maskable(text);
        let image_rows = sample_mask(&image_cand, c.mask_ratio, rng);
        let text_rows = sample_mask(&text_cand, c.mask_ratio, rng);
        let hm_i = self.apply_mask(tape, Modality::Image, h_i, &image_rows)?;
        let hm_t = self.apply_mask(tape, Modality::Text, h_t, &text_rows)?;
        let grounded_image = self.encode_grounded(tape, Modality::Image, hm_i, &keep_i, z_text, keep_t)?;
        let grounded_text = self.encode_grounded(tape, Modality::Text, hm_t, keep_t, z_image, &keep_i)?;
        let recon_image = self.decode_image(tape, grounded_image)?;
        let recon_text_logits = self.decode_text(tape, grounded_text, keep_t)?;

        let image_masked: Vec<usize> = image_rows.iter().map(|r| r - 1).collect();
        let (image_loss_rows, text_loss_rows) = if c.recon_all_positions {
            (image_cand.iter().map(|r| r - 1).collect(), text_cand)
        } else {
            (image_masked.clone(), text_rows.clone())
        };
        Ok(ForwardOutputs {
            z_image,
            z_text,
            z_image_cls,
            z_text_cls,
            grounded_image,
            grounded_text,
            recon_image,
            recon_text_logits,
            class_logits,
            image_masked,
            text_masked: text_rows,
            image_loss_rows,
            text_loss_rows,
        })
    }
}

/// Attention of the `[CLS]` query in the last unimodal block, averaged over
/// heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Weights over patches in patch order (`grid_side³`), renormalised
    /// after dropping the `[CLS]` key.
    pub image_heat: Vec<f64>,
    pub grid_side: usize,
    /// Weights over all `L_max` positions; pads are exactly zero.
    pub text_heat: Vec<f64>,
}

impl AttentionMap {
    pub fn image_at(&self, i: usize, j: usize, k: usize) -> f64 {
        let g = self.grid_side;
        self.image_heat[(i * g + j) * g + k]
    }
}

pub fn extract_attention_map(params: &AlifuseParams, image: &PatchGrid, text: &TokenSequence) -> Result<AttentionMap> {
    if params.config().n_enc_layers == 0 {
        return Err(Error::Contract("attention maps need at least one encoder block".into()));
    }
    let mut tape = GradientTape::new();
    let net = Network::bind_frozen(params, &mut tape);
    let h_i = net.embed_image(&mut tape, image)?;
    let h_t = net.embed_text(&mut tape, text)?;
    let keep_i = vec![true; tape.shape(h_i)[0]];
    let mut rec_i = AttentionRecorder::default();
    let mut rec_t = AttentionRecorder::default();
    net.encode_unimodal(&mut tape, Modality::Image, h_i, &keep_i, Some(&mut rec_i))?;
    net.encode_unimodal(&mut tape, Modality::Text, h_t, &text.pad_mask, Some(&mut rec_t))?;

    let last_i = rec_i.layers.last().expect("one record per block");
    let patches = &last_i.row(0)[1..];
    let total: f64 = patches.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("[CLS] puts no weight on any patch".into()));
    }
    let image_heat = patches.iter().map(|w| w / total).collect();
    let text_heat = rec_t.layers.last().expect("one record per block").row(0).to_vec();
    Ok(AttentionMap { image_heat, grid_side: params.config().grid_side(), text_heat })
}
