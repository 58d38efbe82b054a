//! Masking procedures and the four pretraining losses.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::autograd::{Graph, Var};
use crate::encoders::{linear, PatchSequence};
use crate::error::{Error, Result};
use crate::kg::{sample_negatives, EntityId, KnowledgeGraph, RelationId, Triplet};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 0.5;

/// `⌈rate · n⌉`, ignoring float noise below 1e-9 (so `0.1 · 30` is 3).
pub fn mask_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("mask rate {rate} outside (0, 1)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMasking {
    /// Sorted sequence positions (never 0, the CLS slot).
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMasking {
    /// Sorted patch indices.
    pub positions: Vec<usize>,
    /// Raw patch vectors at `positions`, `|positions| × patch_dim`.
    pub targets: Tensor,
    pub rate: f64,
}

/// Span masking over positions `1..len`. Spans start uniformly, have length
/// `1 + Geometric(1 / mean_span)` capped at `max_span`, wrap around the end
/// of the sequence, and merge on overlap. Stops at exactly
/// `⌈rate · (len − 1)⌉` masked positions.
pub fn mask_spans(
    tokens: &[usize],
    rate: f64,
    mean_span: f64,
    max_span: usize,
    mask_id: usize,
    seed: u64,
) -> Result<(Vec<usize>, TokenMasking)> {
    check_rate(rate)?;
    if !(mean_span >= 1.0) || max_span == 0 {
        return Err(Error::invalid("span lengths need mean >= 1 and max >= 1"));
    }
    let n = tokens.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::invalid("no maskable tokens after CLS"));
    }
    let target = mask_count(n, rate);
    let geo = Geometric::new(1.0 / mean_span).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from(seed);
    let mut hit = vec![false; n];
    let mut count = 0;
    while count < target {
        let start = rng.random_range(0..n);
        let len = (1 + geo.sample(&mut rng) as usize).min(max_span);
        for j in 0..len {
            let p = (start + j) % n;
            if !hit[p] {
                hit[p] = true;
                count += 1;
                if count == target {
                    break;
                }
            }
        }
    }
    let positions: Vec<usize> = (0..n).filter(|&p| hit[p]).map(|p| p + 1).collect();
    let originals = positions.iter().map(|&p| tokens[p]).collect();
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = mask_id;
    }
    Ok((
        masked,
        TokenMasking {
            positions,
            originals,
            rate,
        },
    ))
}

/// Mean cross-entropy of one logit row per masked token.
pub fn mlm_loss(g: &mut Graph, logits: Var, record: &TokenMasking) -> Result<Var> {
    let rows = g.value(logits).dims2()?.0;
    if rows != record.originals.len() {
        return Err(Error::invalid(format!(
            "{rows} logit rows for {} masked tokens",
            record.originals.len()
        )));
    }
    g.cross_entropy(logits, &record.originals)
}

/// `⌈rate · N⌉` patches chosen uniformly without replacement. The encoder
/// swaps their projected embeddings for the learned mask vector.
pub fn mask_patches(seq: &PatchSequence, rate: f64, seed: u64) -> Result<PatchMasking> {
    check_rate(rate)?;
    let n = seq.len();
    if n == 0 {
        return Err(Error::invalid("cannot mask an empty patch sequence"));
    }
    let k = mask_count(n, rate);
    let mut rng = rng_from(seed);
    let mut positions = sample(&mut rng, n, k).into_vec();
    positions.sort_unstable();
    let rows: Vec<Vec<f64>> = positions.iter().map(|&p| seq.patches.row_slice(p).to_vec()).collect();
    let targets = if rows.is_empty() {
        Tensor::zeros(&[0, seq.patches.cols()])
    } else {
        Tensor::from_rows(&rows)?
    };
    Ok(PatchMasking {
        positions,
        targets,
        rate,
    })
}

/// Mean squared error against the raw patches.
pub fn mvm_loss(g: &mut Graph, pred: Var, record: &PatchMasking) -> Result<Var> {
    let rows = g.value(pred).dims2()?.0;
    if rows != record.positions.len() {
        return Err(Error::invalid(format!(
            "{rows} predictions for {} masked patches",
            record.positions.len()
        )));
    }
    g.mse(pred, &record.targets)
}

/// Trilinear score of plain vectors.
pub fn distmult_value(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(Error::invalid(format!(
            "distmult widths {}, {}, {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    Ok(h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum())
}

/// `Σ_d h_d r_d t_d` row by row: `m × d` inputs give an `m × 1` column.
pub fn distmult(g: &mut Graph, h: Var, r: Var, t: Var) -> Result<Var> {
    let hr = g.mul(h, r)?;
    let hrt = g.mul(hr, t)?;
    g.sum_cols(hrt)
}

/// Entity and relation vectors used by the link prediction loss.
#[derive(Clone, Debug)]
pub struct ScoringTables {
    /// `|entities| × d`.
    pub entities: Var,
    /// `|relations| × d`.
    pub relations: Var,
    pub entity_row: HashMap<EntityId, usize>,
    pub relation_row: HashMap<RelationId, usize>,
    pub margin: f64,
    pub negatives: usize,
}

impl ScoringTables {
    fn rows(&self, ts: &[Triplet]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let ent = |id: EntityId| self.entity_row.get(&id).copied().ok_or(Error::UnknownEntity(id));
        let mut h = Vec::with_capacity(ts.len());
        let mut r = Vec::with_capacity(ts.len());
        let mut t = Vec::with_capacity(ts.len());
        for tr in ts {
            h.push(ent(tr.head)?);
            r.push(
                self.relation_row
                    .get(&tr.relation)
                    .copied()
                    .ok_or(Error::UnknownRelation(tr.relation))?,
            );
            t.push(ent(tr.tail)?);
        }
        Ok((h, r, t))
    }

    /// DistMult scores of `ts` as an `m × 1` column.
    pub fn score(&self, g: &mut Graph, ts: &[Triplet]) -> Result<Var> {
        let (h, r, t) = self.rows(ts)?;
        let hv = g.gather_rows(self.entities, &h)?;
        let rv = g.gather_rows(self.relations, &r)?;
        let tv = g.gather_rows(self.entities, &t)?;
        distmult(g, hv, rv, tv)
    }
}

/// Negative-sampling loss from precomputed scores: `pos` is `m × 1`, `neg`
/// holds `n` consecutive rows per positive. Returns
/// `mean_i [−log σ(φ_i + γ) + (1/n) Σ_j −log σ(−φ′_ij − γ)]`.
pub fn linkpred_from_scores(g: &mut Graph, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let m = g.value(pos).dims2()?.0;
    let mn = g.value(neg).dims2()?.0;
    if m == 0 || mn == 0 || mn % m != 0 {
        return Err(Error::invalid(format!(
            "{mn} negative scores do not split evenly over {m} positives"
        )));
    }
    let p = g.add_scalar(pos, margin)?;
    let p = g.log_sigmoid(p)?;
    let p = g.mean(p)?;
    let q = g.add_scalar(neg, margin)?;
    let q = g.scale(q, -1.0)?;
    let q = g.log_sigmoid(q)?;
    // every positive has the same n, so the per-positive mean of the
    // negative terms averages to the global mean
    let q = g.mean(q)?;
    let s = g.add(p, q)?;
    g.scale(s, -1.0)
}

/// Negatives for `positives[i]` are drawn under
/// `derive_seed(seed, NEGATIVES, i)`.
pub fn draw_negatives(kg: &KnowledgeGraph, positives: &[Triplet], n: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(positives.len() * n);
    for (i, &p) in positives.iter().enumerate() {
        out.extend(sample_negatives(kg, p, n, derive_seed(seed, stream::NEGATIVES, i as u64))?);
    }
    Ok(out)
}

/// Link prediction loss over `positives`, with `tables.negatives`
/// corruptions per positive sampled against `kg`.
pub fn linkpred_loss(
    g: &mut Graph,
    positives: &[Triplet],
    tables: &ScoringTables,
    kg: &KnowledgeGraph,
    seed: u64,
) -> Result<Var> {
    let negatives = draw_negatives(kg, positives, tables.negatives, seed)?;
    linkpred_with_negatives(g, positives, &negatives, tables)
}

/// As [`linkpred_loss`] with the negatives supplied.
pub fn linkpred_with_negatives(
    g: &mut Graph,
    positives: &[Triplet],
    negatives: &[Triplet],
    tables: &ScoringTables,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::invalid("link prediction needs at least one positive"));
    }
    let pos = tables.score(g, positives)?;
    let neg = tables.score(g, negatives)?;
    linkpred_from_scores(g, pos, neg, tables.margin)
}

#[derive(Clone, Debug)]
pub struct ItcParams {
    pub image_head: ParamId,
    pub image_bias: ParamId,
    pub text_head: ParamId,
    pub text_bias: ParamId,
    /// `1 × 1`, the natural log of the temperature.
    pub log_temperature: ParamId,
}

impl ItcParams {
    pub fn init(store: &mut ParamStore, width: usize, tau: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("temperature {tau} must be > 0")));
        }
        Ok(Self {
            image_head: store.add_uniform("itc.image_head", width, width, rng)?,
            image_bias: store.add_bias("itc.image_bias", width, width, rng)?,
            text_head: store.add_uniform("itc.text_head", width, width, rng)?,
            text_bias: store.add_bias("itc.text_bias", width, width, rng)?,
            log_temperature: store.add("itc.log_temperature", Tensor::scalar(tau.ln()))?,
        })
    }
}

/// In-batch symmetric InfoNCE on already normalised `B × d` embeddings:
/// `S = I Tᵀ / τ`, loss `½ (CE(rows of S) + CE(columns of S))` with the
/// diagonal as targets. `tau` is `1 × 1` and clamped to `[TAU_MIN, TAU_MAX]`.
pub fn contrastive_loss(g: &mut Graph, image: Var, text: Var, tau: Var) -> Result<Var> {
    let b = g.value(image).dims2()?.0;
    if b < 2 {
        return Err(Error::invalid(format!("contrastive loss needs a batch of >= 2, got {b}")));
    }
    let tau = g.clamp(tau, TAU_MIN, TAU_MAX)?;
    let s = g.matmul_nt(image, text)?;
    let s = g.div_scalar(s, tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let i2t = g.cross_entropy(s, &diag)?;
    let st = g.transpose(s)?;
    let t2i = g.cross_entropy(st, &diag)?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, 0.5)
}

/// Projects both sides through their heads, L2-normalises them and applies
/// [`contrastive_loss`] with the learned temperature `exp(log_temperature)`.
pub fn itc_loss(g: &mut Graph, bound: &BoundParams, params: &ItcParams, image: Var, text: Var) -> Result<Var> {
    let i = linear(g, image, bound[params.image_head], Some(bound[params.image_bias]))?;
    let i = g.l2_normalize_rows(i)?;
    let t = linear(g, text, bound[params.text_head], Some(bound[params.text_bias]))?;
    let t = g.l2_normalize_rows(t)?;
    let tau = g.exp(bound[params.log_temperature])?;
    contrastive_loss(g, i, t, tau)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mlm: f64,
    pub mvm: f64,
    pub linkpred: f64,
    pub itc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            mvm: 1.0,
            linkpred: 1.0,
            itc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.mlm, self.mvm, self.linkpred, self.itc]
    }
}

pub const COMPONENTS: [&str; 4] = ["mlm", "mvm", "linkpred", "itc"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub mlm: f64,
    pub mvm: f64,
    pub linkpred: f64,
    pub itc: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> [f64; 4] {
        [self.mlm, self.mvm, self.linkpred, self.itc]
    }
}

/// Weighted sum of the four `1 × 1` components, in [`COMPONENTS`] order.
pub fn total_loss(g: &mut Graph, parts: [Var; 4], weights: LossWeights) -> Result<(Var, LossBundle)> {
    let w = weights.as_array();
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("loss weights {w:?} must be finite and >= 0")));
    }
    let mut vals = [0.0; 4];
    for (i, &p) in parts.iter().enumerate() {
        let v = g.value(p).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", COMPONENTS[i])));
        }
        vals[i] = v;
    }
    let mut total = g.scale(parts[0], w[0])?;
    for i in 1..4 {
        let t = g.scale(parts[i], w[i])?;
        total = g.add(total, t)?;
    }
    let bundle = LossBundle {
        mlm: vals[0],
        mvm: vals[1],
        linkpred: vals[2],
        itc: vals[3],
        weights,
        total: g.value(total).item(),
    };
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_count_is_a_clean_ceiling() {
        assert_eq!(mask_count(16, 0.25), 4);
        assert_eq!(mask_count(30, 0.1), 3);
        assert_eq!(mask_count(15, 0.25), 4);
        assert_eq!(mask_count(1, 0.25), 1);
    }

    #[test]
    fn span_mask_hits_exact_count_and_spares_cls() {
        let toks: Vec<usize> = (0..17).map(|i| i + 10).collect();
        let (masked, rec) = mask_spans(&toks, 0.25, 3.0, 5, 3, 9).unwrap();
        assert_eq!(rec.positions.len(), 4);
        assert_eq!(masked[0], toks[0]);
        for &p in &rec.positions {
            assert_eq!(masked[p], 3);
        }
        assert_eq!(mask_spans(&toks, 0.25, 3.0, 5, 3, 9).unwrap().1, rec);
        assert!(mask_spans(&toks[..1], 0.25, 3.0, 5, 3, 9).is_err());
    }

    #[test]
    fn distmult_worked_example() {
        assert_eq!(distmult_value(&[1.0, 2.0], &[1.0, 1.0], &[3.0, 1.0]).unwrap(), 5.0);
        assert!(distmult_value(&[1.0], &[1.0, 1.0], &[3.0, 1.0]).is_err());
    }

    #[test]
    fn contrastive_needs_two() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 0.0]).unwrap());
        let t = g.constant(Tensor::scalar(0.1));
        assert!(contrastive_loss(&mut g, a, a, t).is_err());
    }

    #[test]
    fn weights_select_components() {
        let mut g = Graph::new();
        let parts = [1.5, 2.0, 3.0, 4.0].map(|v| g.constant(Tensor::scalar(v)));
        let w = LossWeights {
            mlm: 1.0,
            mvm: 0.0,
            linkpred: 0.0,
            itc: 0.0,
        };
        let (_, b) = total_loss(&mut g, parts, w).unwrap();
        assert_eq!(b.total, 1.5);
        let (_, b) = total_loss(&mut g, parts, LossWeights::default()).unwrap();
        assert_eq!(b.total, 10.5);
    }
}
