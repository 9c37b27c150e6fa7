//! Packing of multimodal samples into one padded sequence per sample and the
//! pre-norm transformer encoder that runs over it.
//!
//! Layout per sample: `[CLS] text [SEP] visual acoustic [PAD]...`. The text
//! embedder covers `[CLS]` through `[SEP]`; the frame segments are embedded by
//! their own modality embedders with positions restarting at zero.

use std::ops::Range;

use crate::autodiff::Var;
use crate::corpus::MultimodalSample;
use crate::embed::{embed, mask_frame_input, Modality, RawInput};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, TextAction};
use crate::model::Session;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

/// One sample ready for packing. `token_ids` includes `[CLS]` and `[SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackItem {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub visual: Option<Tensor>,
    pub acoustic: Option<Tensor>,
}

impl PackItem {
    /// Builds an item from a sample, applying `plan` if given.
    pub fn from_sample(sample: &MultimodalSample, plan: Option<&MaskPlan>, vocab: &Vocab) -> Result<Self> {
        let mut text: Vec<usize> = sample.text.ids.iter().map(|&t| t as usize).collect();
        let mut visual = sample.visual.clone();
        let mut acoustic = sample.acoustic.clone();
        if let Some(plan) = plan {
            for &(p, action) in &plan.text_actions {
                let slot = text.get_mut(p).ok_or(Error::Index {
                    index: p,
                    len: sample.text.len(),
                })?;
                match action {
                    TextAction::Mask => *slot = vocab.mask as usize,
                    TextAction::Random(id) => *slot = id as usize,
                    TextAction::Keep => {}
                }
            }
            match plan.modality() {
                Modality::Visual => visual = mask_frame_input(&visual, &plan.frame_positions)?,
                Modality::Acoustic => acoustic = mask_frame_input(&acoustic, &plan.frame_positions)?,
                Modality::Text => {}
            }
        }
        let mut token_ids = Vec::with_capacity(text.len() + 2);
        token_ids.push(vocab.cls as usize);
        token_ids.extend(text);
        token_ids.push(vocab.sep as usize);
        Ok(Self {
            id: sample.id.clone(),
            token_ids,
            visual: Some(visual),
            acoustic: Some(acoustic),
        })
    }

    fn frames(&self, m: Modality) -> Option<&Tensor> {
        match m {
            Modality::Visual => self.visual.as_ref(),
            Modality::Acoustic => self.acoustic.as_ref(),
            Modality::Text => None,
        }
    }
}

/// Where each segment lives inside one packed row block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSpans {
    /// Text tokens, excluding `[CLS]` and `[SEP]`.
    pub text: Range<usize>,
    pub visual: Range<usize>,
    pub acoustic: Range<usize>,
    /// Number of real (unpadded) positions.
    pub len: usize,
}

impl SegmentSpans {
    pub fn segment(&self, m: Modality) -> &Range<usize> {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedInput {
    pub items: Vec<PackItem>,
    pub spans: Vec<SegmentSpans>,
    pub seq_len: usize,
    /// `batch · seq_len` flags; true marks a real position.
    pub mask: Vec<bool>,
}

impl PackedInput {
    /// Packs items, padding to the longest one (and to at least `min_len`).
    pub fn new(items: Vec<PackItem>, max_len: usize, min_len: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("cannot pack an empty batch".into()));
        }
        let mut spans = Vec::with_capacity(items.len());
        for item in &items {
            if item.token_ids.len() < 2 {
                return Err(Error::InvalidInput(format!("sample {} lacks [CLS]/[SEP]", item.id)));
            }
            let n = item.token_ids.len() - 2;
            let tv = item.visual.as_ref().map_or(0, Tensor::rows);
            let ta = item.acoustic.as_ref().map_or(0, Tensor::rows);
            let visual = n + 2..n + 2 + tv;
            let acoustic = visual.end..visual.end + ta;
            let len = acoustic.end;
            if len > max_len {
                return Err(Error::Length {
                    len,
                    max: max_len,
                    context: format!("sample {}", item.id),
                });
            }
            spans.push(SegmentSpans {
                text: 1..1 + n,
                visual,
                acoustic,
                len,
            });
        }
        let seq_len = spans.iter().map(|s| s.len).max().unwrap_or(0).max(min_len);
        let mask = spans
            .iter()
            .flat_map(|s| (0..seq_len).map(move |j| j < s.len))
            .collect();
        Ok(Self {
            items,
            spans,
            seq_len,
            mask,
        })
    }

    pub fn batch(&self) -> usize {
        self.items.len()
    }

    /// Global row index of position `pos` inside segment `m` of sample `b`.
    pub fn row(&self, b: usize, m: Modality, pos: usize) -> usize {
        b * self.seq_len + self.spans[b].segment(m).start + pos
    }

    /// Global row of sample `b`'s `[CLS]`.
    pub fn cls_row(&self, b: usize) -> usize {
        b * self.seq_len
    }
}

/// Packs samples with optional per-sample masking plans.
pub fn pack(
    samples: &[&MultimodalSample],
    plans: &[Option<&MaskPlan>],
    vocab: &Vocab,
    max_len: usize,
) -> Result<PackedInput> {
    if !plans.is_empty() && plans.len() != samples.len() {
        return Err(Error::InvalidInput(format!(
            "{} plans for {} samples",
            plans.len(),
            samples.len()
        )));
    }
    let items = samples
        .iter()
        .enumerate()
        .map(|(i, s)| PackItem::from_sample(s, plans.get(i).copied().flatten(), vocab))
        .collect::<Result<Vec<_>>>()?;
    PackedInput::new(items, max_len, 0)
}

/// Embeds every segment and lays the rows out as `[batch·seq_len × H]`,
/// padding rows with zeros.
pub fn embed_packed(sess: &mut Session<'_>, packed: &PackedInput) -> Result<Var> {
    let h = sess.config.hidden;
    let mut parts = Vec::new();
    for (item, span) in packed.items.iter().zip(&packed.spans) {
        parts.push(embed(sess, Modality::Text, RawInput::Tokens(&item.token_ids))?);
        for m in [Modality::Visual, Modality::Acoustic] {
            if let Some(f) = item.frames(m).filter(|f| f.rows() > 0) {
                parts.push(embed(sess, m, RawInput::Frames(f))?);
            }
        }
        let pad = packed.seq_len - span.len;
        if pad > 0 {
            parts.push(sess.graph.constant(Tensor::zeros(&[pad, h])));
        }
    }
    sess.graph.concat_rows(&parts)
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final hidden states `[batch·seq_len × H]`.
    pub hidden: Var,
    /// Attention outputs per layer (probabilities via `Graph::attention_probs`).
    pub attention: Vec<Var>,
}

/// Runs the encoder: per layer `x += Wo·attn(LN1 x)`, `x += FFN(LN2 x)`,
/// then a final layer norm.
pub fn encode(sess: &mut Session<'_>, packed: &PackedInput) -> Result<Encoded> {
    for (b, span) in packed.spans.iter().enumerate() {
        if span.len == 0 {
            return Err(Error::InvalidInput(format!("sample {b} has no real positions")));
        }
    }
    let mut x = embed_packed(sess, packed)?;
    let heads = sess.config.heads;
    let mut attention = Vec::with_capacity(sess.config.layers);
    for l in 0..sess.config.layers {
        let pre = format!("layers.{l}");
        let n = sess.layer_norm(x, &format!("{pre}.ln1"))?;
        let q = sess.linear(n, &format!("{pre}.attn.q"))?;
        let k = sess.linear(n, &format!("{pre}.attn.k"))?;
        let v = sess.linear(n, &format!("{pre}.attn.v"))?;
        let a = sess.graph.attention(q, k, v, &packed.mask, packed.seq_len, heads)?;
        attention.push(a);
        let o = sess.linear(a, &format!("{pre}.attn.o"))?;
        x = sess.graph.add(x, o)?;

        let n = sess.layer_norm(x, &format!("{pre}.ln2"))?;
        let f = sess.linear(n, &format!("{pre}.ffn.in"))?;
        let f = sess.graph.gelu(f);
        let f = sess.linear(f, &format!("{pre}.ffn.out"))?;
        x = sess.graph.add(x, f)?;
    }
    let hidden = sess.layer_norm(x, "final_ln")?;
    Ok(Encoded { hidden, attention })
}
