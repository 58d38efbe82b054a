//! Filtered link-prediction ranking, retrieval recall, and a standalone
//! embedding-table trainer for the link prediction objective.

use std::collections::{HashMap, HashSet};

use rand_distr::{Distribution, StandardNormal};

use super::corpus::{oracle_queries, SyntheticCorpus};
use super::model::Model;
use super::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::autograd::Graph;
use crate::encoders::patchify;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triplet};
use crate::objectives::{linkpred_loss, ScoringTables};
use crate::params::ParamStore;
use crate::retriever::{retrieve, EntityMemory};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkPredMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    /// Ranking queries evaluated (two per held-out triplet).
    pub queries: usize,
}

/// 1 + the number of unfiltered candidates scoring at least as high as the
/// target, so ties resolve to the worst rank.
pub fn pessimal_rank(scores: &[f64], target: usize, filtered: &HashSet<usize>) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != target && !filtered.contains(&i) && v >= s)
        .count()
}

/// Vectors for DistMult ranking: `entities` rows follow `entity_ids`,
/// `relations` rows follow `relation_ids`.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub entity_ids: Vec<EntityId>,
    pub entities: Tensor,
    pub relation_ids: Vec<RelationId>,
    pub relations: Tensor,
}

/// Ranks the tail among all entities by `φ_r(h, ·)` and the head by
/// `φ_r(·, t)`, filtering every other triplet of `known` and `held_out`.
pub fn eval_linkpred_tables(
    tables: &EmbeddingTables,
    held_out: &[Triplet],
    known: &KnowledgeGraph,
) -> Result<LinkPredMetrics> {
    if held_out.is_empty() {
        return Err(Error::invalid("no held-out triplets to rank"));
    }
    let ent: HashMap<EntityId, usize> = tables.entity_ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let rel: HashMap<RelationId, usize> = tables.relation_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let truth: HashSet<Triplet> = known.triplets().iter().chain(held_out).copied().collect();
    let n = tables.entity_ids.len();
    let d = tables.entities.cols();
    let e = |i: usize| tables.entities.row_slice(i);
    let (mut rr, mut h1, mut h10) = (0.0, 0.0, 0.0);
    for t in held_out {
        let hi = *ent.get(&t.head).ok_or(Error::UnknownEntity(t.head))?;
        let ti = *ent.get(&t.tail).ok_or(Error::UnknownEntity(t.tail))?;
        let ri = *rel.get(&t.relation).ok_or(Error::UnknownRelation(t.relation))?;
        let r = tables.relations.row_slice(ri);
        for corrupt_tail in [true, false] {
            let fixed = if corrupt_tail { e(hi) } else { e(ti) };
            let hr: Vec<f64> = (0..d).map(|k| fixed[k] * r[k]).collect();
            let scores: Vec<f64> = (0..n)
                .map(|c| e(c).iter().zip(&hr).map(|(a, b)| a * b).sum())
                .collect();
            let filtered: HashSet<usize> = (0..n)
                .filter(|&c| {
                    let cand = if corrupt_tail {
                        Triplet::new(t.head, t.relation, tables.entity_ids[c])
                    } else {
                        Triplet::new(tables.entity_ids[c], t.relation, t.tail)
                    };
                    truth.contains(&cand)
                })
                .collect();
            let rank = pessimal_rank(&scores, if corrupt_tail { ti } else { hi }, &filtered);
            rr += 1.0 / rank as f64;
            h1 += f64::from(rank <= 1);
            h10 += f64::from(rank <= 10);
        }
    }
    let q = 2 * held_out.len();
    Ok(LinkPredMetrics {
        mrr: rr / q as f64,
        hits1: h1 / q as f64,
        hits10: h10 / q as f64,
        queries: q,
    })
}

/// Ranking with a trained model's context-free vectors: memory rows through
/// the entity projection, and the outgoing relation rows.
pub fn eval_linkpred(model: &Model, corpus: &SyntheticCorpus, held_out: &[Triplet]) -> Result<LinkPredMetrics> {
    let tables = EmbeddingTables {
        entity_ids: corpus.memory.ids().to_vec(),
        entities: model.entity_table(corpus)?,
        relation_ids: corpus.kg.relation_ids(),
        relations: model.relation_table(&corpus.kg)?,
    };
    eval_linkpred_tables(&tables, held_out, &corpus.kg)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Mean filtered MRR of standard-normal embeddings over `seeds` draws.
pub fn random_baseline_mrr(known: &KnowledgeGraph, held_out: &[Triplet], dim: usize, seeds: u64) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..seeds {
        let tables = EmbeddingTables {
            entity_ids: known.entity_ids().to_vec(),
            entities: gaussian(known.entity_ids().len(), dim, derive_seed(s, stream::INIT, 1))?,
            relation_ids: known.relation_ids(),
            relations: gaussian(known.relations().len(), dim, derive_seed(s, stream::INIT, 2))?,
        };
        total += eval_linkpred_tables(&tables, held_out, known)?.mrr;
    }
    Ok(total / seeds as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableTraining {
    pub dim: usize,
    pub negatives: usize,
    pub margin: f64,
    pub steps: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

/// Trains free entity and relation tables on every triplet of `train` with
/// the link prediction loss (full batch, fresh negatives each step).
pub fn train_embedding_tables(train: &KnowledgeGraph, cfg: &TableTraining) -> Result<(EmbeddingTables, Vec<f64>)> {
    if train.triplets().is_empty() {
        return Err(Error::invalid("no training triplets"));
    }
    let entity_ids = train.entity_ids().to_vec();
    let relation_ids = train.relation_ids();
    let mut store = ParamStore::new();
    let mut rng = rng_from(derive_seed(cfg.seed, stream::INIT, 0));
    let bound = 1.0 / (cfg.dim as f64).sqrt();
    let ent = store.add_uniform_bound("kge.entities", entity_ids.len(), cfg.dim, bound, &mut rng)?;
    let rel = store.add_uniform_bound("kge.relations", relation_ids.len(), cfg.dim, bound, &mut rng)?;
    let entity_row: HashMap<EntityId, usize> = entity_ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let relation_row: HashMap<RelationId, usize> = relation_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut state = AdamState::new(&store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let tables = ScoringTables {
            entities: b[ent],
            relations: b[rel],
            entity_row: entity_row.clone(),
            relation_row: relation_row.clone(),
            margin: cfg.margin,
            negatives: cfg.negatives,
        };
        let loss = linkpred_loss(&mut g, train.triplets(), &tables, train, derive_seed(cfg.seed, stream::STEP, step as u64))?;
        losses.push(g.value(loss).item());
        let grads = b.grads(&g.backward(loss)?);
        optimizer_step(&mut store, &grads, &mut state, &cfg.optim)?;
    }
    Ok((
        EmbeddingTables {
            entity_ids,
            entities: store.get(ent).clone(),
            relation_ids,
            relations: store.get(rel).clone(),
        },
        losses,
    ))
}

/// Fraction of examples whose ground truth meets the top-`k` retrieved set.
pub fn retrieval_recall(
    queries: &[Tensor],
    ground_truth: &[Vec<EntityId>],
    memory: &EntityMemory,
    k_per_patch: usize,
    k: usize,
) -> Result<f64> {
    if queries.len() != ground_truth.len() || queries.is_empty() {
        return Err(Error::invalid("need one query matrix per example"));
    }
    let mut hit = 0usize;
    for (q, gt) in queries.iter().zip(ground_truth) {
        let set = retrieve(q, memory, k_per_patch, k)?;
        if set.entries.iter().any(|e| gt.contains(&e.id)) {
            hit += 1;
        }
    }
    Ok(hit as f64 / queries.len() as f64)
}

/// Recall@k with the model's learned queries (per-patch budget `k` too).
pub fn eval_retrieval(model: &Model, corpus: &SyntheticCorpus, k: usize) -> Result<f64> {
    let patch = model.config.patch;
    let queries = (0..corpus.examples.len())
        .map(|i| model.queries(&patchify(&corpus.examples[i].image, patch)?))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<EntityId>> = corpus.examples.iter().map(|e| e.ground_truth.clone()).collect();
    retrieval_recall(&queries, &gt, &corpus.memory, k, k)
}

/// Recall@k with queries folded straight from the raw patches.
pub fn eval_retrieval_oracle(corpus: &SyntheticCorpus, patch: usize, k: usize) -> Result<f64> {
    let d = corpus.memory.dim();
    let queries = corpus
        .examples
        .iter()
        .map(|e| oracle_queries(&patchify(&e.image, patch)?, d))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<EntityId>> = corpus.examples.iter().map(|e| e.ground_truth.clone()).collect();
    retrieval_recall(&queries, &gt, &corpus.memory, k, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_take_the_worst_rank() {
        let s = [1.0, 2.0, 2.0, 2.0, 0.5];
        assert_eq!(pessimal_rank(&s, 1, &HashSet::new()), 3);
        assert_eq!(pessimal_rank(&s, 1, &[2].into_iter().collect()), 2);
        assert_eq!(pessimal_rank(&s, 4, &HashSet::new()), 5);
    }
}
