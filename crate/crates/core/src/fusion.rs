//! The fused `[CLS] patches [SEP] tokens [SEP] entities` sequence, the dense
//! transformer over it and the prediction heads.

use std::ops::Range;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{linear, transformer_stack, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentType {
    Visual = 0,
    Textual = 1,
    Entity = 2,
    Special = 3,
}

impl SegmentType {
    pub fn row(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Boundaries {
    pub visual: Range<usize>,
    pub textual: Range<usize>,
    pub entity: Range<usize>,
}

/// Segment tags and spans for `patches` visual, `tokens` textual and
/// `entities` entity elements.
pub fn layout(patches: usize, tokens: usize, entities: usize) -> (Vec<SegmentType>, Boundaries) {
    let visual = 1..1 + patches;
    let textual = visual.end + 1..visual.end + 1 + tokens;
    let entity = textual.end + 1..textual.end + 1 + entities;
    let mut tags = Vec::with_capacity(entity.end);
    tags.push(SegmentType::Special);
    tags.extend(std::iter::repeat_n(SegmentType::Visual, patches));
    tags.push(SegmentType::Special);
    tags.extend(std::iter::repeat_n(SegmentType::Textual, tokens));
    tags.push(SegmentType::Special);
    tags.extend(std::iter::repeat_n(SegmentType::Entity, entities));
    (
        tags,
        Boundaries {
            visual,
            textual,
            entity,
        },
    )
}

#[derive(Clone, Debug)]
pub struct FusedSequence {
    /// `L × d`, type embeddings already added.
    pub elements: Var,
    pub segment_types: Vec<SegmentType>,
    pub boundaries: Boundaries,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.segment_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_types.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub width: usize,
    pub layers: Vec<TransformerLayerParams>,
    /// One row per [`SegmentType`].
    pub type_embedding: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    pub mlm_head: ParamId,
    pub mlm_bias: ParamId,
    pub mvm_head: ParamId,
    pub mvm_bias: ParamId,
}

impl FusionParams {
    pub fn init(
        store: &mut ParamStore,
        width: usize,
        depth: usize,
        heads: usize,
        vocab: usize,
        patch_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let layers = (0..depth)
            .map(|l| TransformerLayerParams::init(store, &format!("fusion.layer{l}"), width, heads, 4 * width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            layers,
            type_embedding: store.add_uniform_bound("fusion.type_embedding", 4, width, bound, rng)?,
            cls: store.add_uniform_bound("fusion.cls", 1, width, bound, rng)?,
            sep: store.add_uniform_bound("fusion.sep", 1, width, bound, rng)?,
            mlm_head: store.add_uniform("fusion.mlm_head", width, vocab, rng)?,
            mlm_bias: store.add_bias("fusion.mlm_bias", width, vocab, rng)?,
            mvm_head: store.add_uniform("fusion.mvm_head", width, patch_dim, rng)?,
            mvm_bias: store.add_bias("fusion.mvm_bias", width, patch_dim, rng)?,
        })
    }
}

fn check_width(g: &Graph, v: Var, width: usize, what: &'static str) -> Result<usize> {
    let (rows, cols) = g.value(v).dims2()?;
    if cols != width {
        return Err(Error::Shape {
            op: what,
            lhs: g.value(v).shape().to_vec(),
            rhs: vec![width],
        });
    }
    Ok(rows)
}

/// Concatenates the segments in the fixed layout and adds each position's
/// type embedding. `entities` may be `None` for an empty entity span.
pub fn assemble(
    g: &mut Graph,
    bound: &BoundParams,
    patches: Var,
    tokens: Var,
    entities: Option<Var>,
    params: &FusionParams,
) -> Result<FusedSequence> {
    let d = params.width;
    let n = check_width(g, patches, d, "assemble(patches)")?;
    let t = check_width(g, tokens, d, "assemble(tokens)")?;
    let k = match entities {
        Some(e) => check_width(g, e, d, "assemble(entities)")?,
        None => 0,
    };
    let (tags, boundaries) = layout(n, t, k);
    let cls = bound[params.cls];
    let sep = bound[params.sep];
    let mut parts = vec![cls, patches, sep, tokens, sep];
    if let Some(e) = entities {
        parts.push(e);
    }
    let x = g.concat_rows(&parts)?;
    let rows: Vec<usize> = tags.iter().map(|s| s.row()).collect();
    let types = g.gather_rows(bound[params.type_embedding], &rows)?;
    let elements = g.add(x, types)?;
    Ok(FusedSequence {
        elements,
        segment_types: tags,
        boundaries,
    })
}

/// Dense attention over every position.
pub fn fuse(g: &mut Graph, bound: &BoundParams, seq: &FusedSequence, params: &FusionParams) -> Result<Var> {
    transformer_stack(g, bound, seq.elements, &params.layers, None)
}

/// Runs several sequences as one zero-padded batch with padding keys masked
/// out, returning each example's unpadded hidden states.
pub fn fuse_padded(
    g: &mut Graph,
    bound: &BoundParams,
    seqs: &[FusedSequence],
    params: &FusionParams,
) -> Result<Vec<Var>> {
    let max = seqs.iter().map(FusedSequence::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let l = seq.len();
        let (x, mask) = if l < max {
            let pad = g.constant(Tensor::zeros(&[max - l, params.width]));
            let x = g.concat_rows(&[seq.elements, pad])?;
            let mask: Vec<bool> = (0..max).map(|i| i < l).collect();
            (x, Some(mask))
        } else {
            (seq.elements, None)
        };
        let h = transformer_stack(g, bound, x, &params.layers, mask.as_deref())?;
        out.push(if l < max { g.slice_rows(h, 0, l)? } else { h });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `|masked tokens| × vocab`, absent when nothing is masked.
    pub mlm_logits: Option<Var>,
    /// `|masked patches| × patch_dim`.
    pub mvm_pred: Option<Var>,
    /// `1 × d`, the hidden state at position 0.
    pub cls_vector: Var,
}

fn absolute(span: &Range<usize>, rel: &[usize], what: &str) -> Result<Vec<usize>> {
    rel.iter()
        .map(|&i| {
            if i < span.len() {
                Ok(span.start + i)
            } else {
                Err(Error::invalid(format!(
                    "masked {what} index {i} outside a segment of {}",
                    span.len()
                )))
            }
        })
        .collect()
}

/// Applies the prediction heads. Masked indices are relative to their
/// segment (token 0 is the text CLS).
pub fn heads(
    g: &mut Graph,
    bound: &BoundParams,
    hidden: Var,
    seq: &FusedSequence,
    params: &FusionParams,
    masked_tokens: &[usize],
    masked_patches: &[usize],
) -> Result<HeadOutputs> {
    let tok = absolute(&seq.boundaries.textual, masked_tokens, "token")?;
    let pat = absolute(&seq.boundaries.visual, masked_patches, "patch")?;
    let mlm_logits = if tok.is_empty() {
        None
    } else {
        let h = g.gather_rows(hidden, &tok)?;
        Some(linear(g, h, bound[params.mlm_head], Some(bound[params.mlm_bias]))?)
    };
    let mvm_pred = if pat.is_empty() {
        None
    } else {
        let h = g.gather_rows(hidden, &pat)?;
        Some(linear(g, h, bound[params.mvm_head], Some(bound[params.mvm_bias]))?)
    };
    let cls_vector = g.slice_rows(hidden, 0, 1)?;
    Ok(HeadOutputs {
        mlm_logits,
        mvm_pred,
        cls_vector,
    })
}
