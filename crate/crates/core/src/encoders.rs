//! Patchify, the shared transformer layer, and the vision, text and entity
//! encoders.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::retriever::EntityMemory;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits an `H × W × C` image into `(H/P)·(W/P)` flattened patches, in
/// row-major patch order, each patch flattened channel-last.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::invalid(format!(
            "image must be H x W x C, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pdim = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pdim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = py * patch + y;
                let start = (row * w + px * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, pdim, out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    let (n, pdim) = patches.dims2()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 || n != (h / patch) * (w / patch) || pdim != patch * patch * c {
        return Err(Error::invalid("patch grid does not match image dimensions"));
    }
    let gw = w / patch;
    let mut out = vec![0.0; h * w * c];
    for i in 0..n {
        let (py, px) = (i / gw, i % gw);
        let p = patches.row_slice(i);
        for y in 0..patch {
            let start = ((py * patch + y) * w + px * patch) * c;
            out[start..start + patch * c].copy_from_slice(&p[y * patch * c..(y + 1) * patch * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Raw patches of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Tensor,
}

impl PatchSequence {
    pub fn from_image(image: &Tensor, patch: usize) -> Result<Self> {
        Ok(Self {
            patches: patchify(image, patch)?,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Vocabulary indices with the CLS index at position 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

/// One post-norm transformer block: multi-head attention with per-head
/// query/key/value/output maps, then a GELU feed-forward, each followed by a
/// residual LayerNorm.
#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub width: usize,
    pub heads: usize,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: Vec<ParamId>,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl TransformerLayerParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!("width {width} not divisible by {heads} heads")));
        }
        let dh = width / heads;
        let query = per_head(store, prefix, "query", heads, width, dh, rng)?;
        let key = per_head(store, prefix, "key", heads, width, dh, rng)?;
        let value = per_head(store, prefix, "value", heads, width, dh, rng)?;
        let output = per_head(store, prefix, "output", heads, dh, width, rng)?;
        let ff_in = store.add_uniform(format!("{prefix}.ff_in"), width, ff_width, rng)?;
        let ff_out = store.add_uniform(format!("{prefix}.ff_out"), ff_width, width, rng)?;
        Ok(Self {
            width,
            heads,
            query,
            key,
            value,
            output,
            ff_in,
            ff_in_bias: store.add_bias(format!("{prefix}.ff_in_bias"), width, ff_width, rng)?,
            ff_out,
            ff_out_bias: store.add_bias(format!("{prefix}.ff_out_bias"), ff_width, width, rng)?,
            norm1_gain: store.add(format!("{prefix}.norm1_gain"), Tensor::full(&[1, width], 1.0))?,
            norm1_bias: store.add_zeros(format!("{prefix}.norm1_bias"), 1, width)?,
            norm2_gain: store.add(format!("{prefix}.norm2_gain"), Tensor::full(&[1, width], 1.0))?,
            norm2_bias: store.add_zeros(format!("{prefix}.norm2_bias"), 1, width)?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

fn per_head(
    store: &mut ParamStore,
    prefix: &str,
    name: &str,
    heads: usize,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ParamId>> {
    (0..heads)
        .map(|m| store.add_uniform(format!("{prefix}.{name}{m}"), rows, cols, rng))
        .collect()
}

fn affine_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let s = g.mul_row(n, gain)?;
    g.add_row(s, bias)
}

/// `x W + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Applies one transformer layer to `x` (`L × d`). Keys with
/// `key_mask[j] == false` are excluded from every softmax. Also returns the
/// per-head attention matrices.
pub fn transformer_layer_with_attention(
    g: &mut Graph,
    bound: &BoundParams,
    x: Var,
    p: &TransformerLayerParams,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.value(x).dims2()?;
    if d != p.width {
        return Err(Error::Shape {
            op: "transformer_layer",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![p.width],
        });
    }
    let scale = 1.0 / (p.head_width() as f64).sqrt();
    let mut attn = Vec::with_capacity(p.heads);
    let mut mixed: Option<Var> = None;
    for m in 0..p.heads {
        let q = g.matmul(x, bound[p.query[m]])?;
        let k = g.matmul(x, bound[p.key[m]])?;
        let v = g.matmul(x, bound[p.value[m]])?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax_rows_masked(logits, key_mask)?;
        let ctx = g.matmul(a, v)?;
        let out = g.matmul(ctx, bound[p.output[m]])?;
        mixed = Some(match mixed {
            Some(acc) => g.add(acc, out)?,
            None => out,
        });
        attn.push(a);
    }
    let mixed = mixed.expect("at least one head");
    let res = g.add(x, mixed)?;
    let h = affine_norm(g, res, bound[p.norm1_gain], bound[p.norm1_bias])?;
    let f = linear(g, h, bound[p.ff_in], Some(bound[p.ff_in_bias]))?;
    let f = g.gelu(f)?;
    let f = linear(g, f, bound[p.ff_out], Some(bound[p.ff_out_bias]))?;
    let res = g.add(h, f)?;
    let out = affine_norm(g, res, bound[p.norm2_gain], bound[p.norm2_bias])?;
    Ok((out, attn))
}

pub fn transformer_layer(
    g: &mut Graph,
    bound: &BoundParams,
    x: Var,
    p: &TransformerLayerParams,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    transformer_layer_with_attention(g, bound, x, p, key_mask).map(|(y, _)| y)
}

pub fn transformer_stack(
    g: &mut Graph,
    bound: &BoundParams,
    mut x: Var,
    layers: &[TransformerLayerParams],
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    for layer in layers {
        x = transformer_layer(g, bound, x, layer, key_mask)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub positions: ParamId,
    pub mask_token: ParamId,
    pub layers: Vec<TransformerLayerParams>,
    /// Maps final patch embeddings to the memory width.
    pub retrieval_proj: ParamId,
}

#[allow(clippy::too_many_arguments)]
impl VisionParams {
    pub fn init(
        store: &mut ParamStore,
        patch_dim: usize,
        patches: usize,
        width: usize,
        memory_width: usize,
        depth: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let patch_proj = store.add_uniform("vision.patch_proj", patch_dim, width, rng)?;
        let patch_bias = store.add_bias("vision.patch_bias", patch_dim, width, rng)?;
        let bound = 1.0 / (width as f64).sqrt();
        let positions = store.add_uniform_bound("vision.positions", patches, width, bound, rng)?;
        let mask_token = store.add_uniform_bound("vision.mask_token", 1, width, bound, rng)?;
        let layers = (0..depth)
            .map(|l| TransformerLayerParams::init(store, &format!("vision.layer{l}"), width, heads, 4 * width, rng))
            .collect::<Result<_>>()?;
        let retrieval_proj = store.add_uniform("vision.retrieval_proj", width, memory_width, rng)?;
        Ok(Self {
            patch_proj,
            patch_bias,
            positions,
            mask_token,
            layers,
            retrieval_proj,
        })
    }
}

/// Projects raw patches, swaps masked rows for the learned mask vector, adds
/// position embeddings and runs the stack. Returns `(patch embeddings N × d,
/// retrieval queries N × d_e)`.
pub fn vision_encode(
    g: &mut Graph,
    bound: &BoundParams,
    params: &VisionParams,
    seq: &PatchSequence,
    masked: &[usize],
) -> Result<(Var, Var)> {
    let n = seq.len();
    let max = g.value(bound[params.positions]).rows();
    if n > max {
        return Err(Error::invalid(format!("{n} patches exceed {max} position embeddings")));
    }
    let raw = g.constant(seq.patches.clone());
    let x = linear(g, raw, bound[params.patch_proj], Some(bound[params.patch_bias]))?;
    let x = if masked.is_empty() {
        x
    } else {
        g.replace_rows(x, bound[params.mask_token], masked)?
    };
    let pos = g.slice_rows(bound[params.positions], 0, n)?;
    let x = g.add(x, pos)?;
    let out = transformer_stack(g, bound, x, &params.layers, None)?;
    let queries = g.matmul(out, bound[params.retrieval_proj])?;
    Ok((out, queries))
}

#[derive(Clone, Debug)]
pub struct TextParams {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayerParams>,
}

impl TextParams {
    pub fn init(
        store: &mut ParamStore,
        vocab: usize,
        max_len: usize,
        width: usize,
        depth: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let token_embedding = store.add_uniform_bound("text.token_embedding", vocab, width, bound, rng)?;
        let positions = store.add_uniform_bound("text.positions", max_len, width, bound, rng)?;
        let layers = (0..depth)
            .map(|l| TransformerLayerParams::init(store, &format!("text.layer{l}"), width, heads, 4 * width, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding,
            positions,
            layers,
        })
    }
}

/// Token embeddings plus position embeddings, then the stack:
/// `(N_t + 1) × d`.
pub fn text_encode(
    g: &mut Graph,
    bound: &BoundParams,
    params: &TextParams,
    seq: &TokenSequence,
) -> Result<Var> {
    let n = seq.tokens.len();
    if n == 0 {
        return Err(Error::invalid("token sequence must contain CLS"));
    }
    let max = g.value(bound[params.positions]).rows();
    if n > max {
        return Err(Error::invalid(format!("{n} tokens exceed {max} positions")));
    }
    let x = g.gather_rows(bound[params.token_embedding], &seq.tokens)?;
    let pos = g.slice_rows(bound[params.positions], 0, n)?;
    let x = g.add(x, pos)?;
    transformer_stack(g, bound, x, &params.layers, None)
}

#[derive(Clone, Debug)]
pub struct EntityParams {
    /// `d_e × d`.
    pub proj: ParamId,
}

impl EntityParams {
    /// Memory rows are unit-norm, so the projection is drawn from
    /// `U(±√3)` to give projected descriptions unit-variance coordinates.
    pub fn init(store: &mut ParamStore, memory_width: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            proj: store.add_uniform_bound("entity.proj", memory_width, width, 3f64.sqrt(), rng)?,
        })
    }
}

/// Memory rows of `ids` as a constant `k × d_e` matrix.
pub fn memory_rows(memory: &EntityMemory, ids: &[EntityId]) -> Result<Tensor> {
    let d = memory.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(memory.row(id)?);
    }
    Tensor::matrix(ids.len(), d, data)
}

/// `e⁽⁰⁾_i = weight_i · (memory row of ids[i]) · proj`; `weights` is a
/// `k × 1` column so retrieval scores stay on the gradient path.
pub fn entity_encode(
    g: &mut Graph,
    bound: &BoundParams,
    params: &EntityParams,
    memory: &EntityMemory,
    ids: &[EntityId],
    weights: Var,
) -> Result<Var> {
    let rows = g.constant(memory_rows(memory, ids)?);
    let projected = g.matmul(rows, bound[params.proj])?;
    g.mul_col(projected, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_by_eight_in_four_patches() {
        let img = Tensor::new(vec![8, 8, 1], (0..64).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        // first patch is the top-left 4x4 block
        assert_eq!(&p.row_slice(0)[..5], &[0.0, 1.0, 2.0, 3.0, 8.0]);
    }

    #[test]
    fn constant_image_has_identical_patches() {
        let img = Tensor::full(&[8, 12, 2], 0.7);
        let p = patchify(&img, 4).unwrap();
        for i in 1..p.rows() {
            assert_eq!(p.row_slice(i), p.row_slice(0));
        }
    }

    #[test]
    fn indivisible_image_names_dimensions() {
        let img = Tensor::zeros(&[6, 8, 1]);
        let err = patchify(&img, 4).unwrap_err().to_string();
        assert!(err.contains("6x8") && err.contains('4'), "{err}");
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::rng_from(0);
        assert!(TransformerLayerParams::init(&mut store, "l", 6, 4, 8, &mut rng).is_err());
    }
}
