//! Entity memory, patch-to-entity scoring and top-k retrieval.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

pub const HASH_BUCKETS: u64 = 4096;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"EMBV0001";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic text embedding: character trigrams of the lowercased,
/// space-padded text are hashed into 4096 buckets, and the bucket counts are
/// projected to `d_e` dimensions by a seeded Gaussian matrix, then
/// L2-normalised. Empty text falls back to bucket 0.
pub fn embed_description(text: &str, d_e: usize, seed: u64) -> Result<Vec<f64>> {
    if d_e < 2 {
        return Err(Error::invalid(format!("embedding width {d_e} < 2")));
    }
    let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
    if text.is_empty() {
        counts.insert(0, 1.0);
    } else {
        let chars: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            *counts.entry(fnv1a(&buf[..len]) % HASH_BUCKETS).or_default() += 1.0;
        }
    }
    let mut out = vec![0.0; d_e];
    for (bucket, count) in counts {
        let mut rng = rng_from(derive_seed(seed, stream::DESCRIPTION, bucket));
        for o in &mut out {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o += count * z;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for o in &mut out {
        *o /= norm;
    }
    Ok(out)
}

/// Unit-normalised entity embeddings, one row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityMemory {
    ids: Vec<EntityId>,
    matrix: Tensor,
    rows: HashMap<EntityId, usize>,
}

impl EntityMemory {
    /// Rows are L2-normalised on the way in.
    pub fn new(ids: Vec<EntityId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::invalid("memory ids and rows differ in length"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::invalid(format!("duplicate memory id {id}")));
            }
        }
        let mut normed = Vec::with_capacity(rows.len());
        for (id, r) in ids.iter().zip(rows) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid(format!("memory row for entity {id} has norm {n}")));
            }
            normed.push(r.into_iter().map(|v| v / n).collect());
        }
        let matrix = if normed.is_empty() {
            Tensor::zeros(&[0, 0])
        } else {
            Tensor::from_rows(&normed)?
        };
        Ok(Self {
            ids,
            matrix,
            rows: index,
        })
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_of(&self, id: EntityId) -> Option<usize> {
        self.rows.get(&id).copied()
    }

    pub fn row(&self, id: EntityId) -> Result<&[f64]> {
        let r = self.row_of(id).ok_or(Error::UnknownEntity(id))?;
        Ok(self.matrix.row_slice(r))
    }

    /// Writes the `EMBV0001` little-endian format (values as `f32`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(16 + self.ids.len() * (8 + 4 * dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            for v in self.matrix.row_slice(i) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format {
            path: origin.to_string(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 16 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != EMBEDDING_MAGIC {
            return Err(err(0, "bad magic, expected EMBV0001".into()));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let record = 8 + 4 * dim;
        let expected = 16 + count * record;
        if bytes.len() != expected {
            let at = if bytes.len() < expected { bytes.len() } else { expected };
            return Err(err(
                at,
                format!(
                    "payload is {} bytes but header declares {count} x {dim} ({} bytes)",
                    bytes.len() - 16,
                    expected - 16
                ),
            ));
        }
        let mut ids = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count);
        for i in 0..count {
            let off = 16 + i * record;
            ids.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            let row: Vec<f64> = bytes[off + 8..off + record]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            if row.iter().any(|v| !v.is_finite()) || row.iter().all(|v| *v == 0.0) {
                return Err(err(off + 8, format!("row {i} is zero or non-finite")));
            }
            rows.push(row);
        }
        Self::new(ids, rows).map_err(|e| err(16, e.to_string()))
    }
}

/// One row per entity of `kg`, in ascending id order.
pub fn build_memory(kg: &KnowledgeGraph, d_e: usize, seed: u64) -> Result<EntityMemory> {
    if kg.entities().is_empty() {
        return Err(Error::invalid("cannot build memory from an empty graph"));
    }
    let mut ids = Vec::with_capacity(kg.entities().len());
    let mut rows = Vec::with_capacity(kg.entities().len());
    for (id, rec) in kg.entities() {
        ids.push(*id);
        rows.push(embed_description(&rec.description, d_e, seed)?);
    }
    EntityMemory::new(ids, rows)
}

/// Inner products of every query row with every memory row (`N × |memory|`).
pub fn score_patches(queries: &Tensor, memory: &EntityMemory) -> Result<Tensor> {
    let (n, d) = queries.dims2()?;
    if d != memory.dim() && !memory.is_empty() {
        return Err(Error::Shape {
            op: "score_patches",
            lhs: queries.shape().to_vec(),
            rhs: memory.matrix().shape().to_vec(),
        });
    }
    let m = memory.len();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let q = queries.row_slice(i);
        for j in 0..m {
            out[i * m + j] = q.iter().zip(memory.matrix.row_slice(j)).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::matrix(n, m, out)
}

/// Differentiable scores: `queries · memoryᵀ` with `memory` a constant.
pub fn score_patches_var(g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
    g.matmul_nt(queries, memory)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievedEntity {
    pub id: EntityId,
    pub score: f64,
    /// Query row that produced the kept (maximum) score.
    pub patch: usize,
    /// Memory row of the entity.
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedEntitySet {
    pub entries: Vec<RetrievedEntity>,
    pub k: usize,
}

impl RetrievedEntitySet {
    pub fn ids(&self) -> Vec<EntityId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score descending, then entity id ascending.
pub fn rank_order(a_score: f64, a_id: EntityId, b_score: f64, b_id: EntityId) -> Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}

/// Per-query top `k_per_patch`, pooled, deduplicated to each entity's
/// maximum score, and cut to the best `k_final`.
pub fn retrieve_from_scores(
    scores: &Tensor,
    ids: &[EntityId],
    k_per_patch: usize,
    k_final: usize,
) -> Result<RetrievedEntitySet> {
    if k_per_patch == 0 || k_final == 0 {
        return Err(Error::invalid("K_per_patch and k_final must be >= 1"));
    }
    if ids.is_empty() {
        return Err(Error::invalid("retrieval over an empty memory"));
    }
    let (n, m) = scores.dims2()?;
    if m != ids.len() {
        return Err(Error::Shape {
            op: "retrieve",
            lhs: scores.shape().to_vec(),
            rhs: vec![ids.len()],
        });
    }
    let k = k_per_patch.min(m);
    let mut best: HashMap<EntityId, RetrievedEntity> = HashMap::new();
    let mut cols: Vec<usize> = Vec::with_capacity(m);
    for p in 0..n {
        let row = scores.row_slice(p);
        cols.clear();
        cols.extend(0..m);
        let cmp = |a: &usize, b: &usize| rank_order(row[*a], ids[*a], row[*b], ids[*b]);
        if k < m {
            cols.select_nth_unstable_by(k - 1, cmp);
        }
        for &c in &cols[..k] {
            let cand = RetrievedEntity {
                id: ids[c],
                score: row[c],
                patch: p,
                column: c,
            };
            best.entry(ids[c])
                .and_modify(|e| {
                    if cand.score > e.score {
                        *e = cand;
                    }
                })
                .or_insert(cand);
        }
    }
    let mut entries: Vec<RetrievedEntity> = best.into_values().collect();
    entries.sort_by(|a, b| rank_order(a.score, a.id, b.score, b.id));
    entries.truncate(k_final);
    Ok(RetrievedEntitySet {
        entries,
        k: k_final,
    })
}

pub fn retrieve(
    patch_embeddings: &Tensor,
    memory: &EntityMemory,
    k_per_patch: usize,
    k_final: usize,
) -> Result<RetrievedEntitySet> {
    if memory.is_empty() {
        return Err(Error::invalid("retrieval over an empty memory"));
    }
    let scores = score_patches(patch_embeddings, memory)?;
    retrieve_from_scores(&scores, memory.ids(), k_per_patch, k_final)
}

/// `softmax(score / temperature)` over the retrieved set.
pub fn relevance_weights(set: &RetrievedEntitySet, temperature: f64) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::invalid("relevance weights of an empty set"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be > 0")));
    }
    let mx = set.entries.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = set
        .entries
        .iter()
        .map(|e| ((e.score - mx) / temperature).exp())
        .collect();
    let z: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|v| v / z).collect())
}

/// Differentiable relevance weights for a `k × 1` column of scores.
pub fn relevance_weights_var(g: &mut Graph, scores: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be > 0")));
    }
    if g.value(scores).is_empty() {
        return Err(Error::invalid("relevance weights of an empty set"));
    }
    let scaled = g.scale(scores, 1.0 / temperature)?;
    let row = g.transpose(scaled)?;
    let w = g.softmax_rows(row)?;
    g.transpose(w)
}
