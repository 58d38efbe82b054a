//! Relation-aware graph attention over a retrieved subgraph.
//!
//! Each layer updates node `i` as
//! `e_i' = f_n(Σ_j α_ij · f_m(e_j, r_ij)) + e_i`, where `j` ranges over the
//! incident edges of `i` plus a self loop, `α` is the softmax over that set of
//! `f_q(e_i)ᵀ f_k(e_j, r_ij) / √D`, and `f_k`, `f_m` act on the concatenation
//! `[e_j, r_ij]`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::encoders::linear;
use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, Subgraph};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::retriever::embed_description;
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

/// Description used to initialise the self-loop row.
pub const SELF_LOOP_DESCRIPTION: &str = "the entity itself";

/// One trainable table shared by every layer: an outgoing and an incoming
/// row per relation, then a final self-loop row.
#[derive(Clone, Debug)]
pub struct RelationTable {
    pub param: ParamId,
    index: BTreeMap<RelationId, usize>,
}

impl RelationTable {
    /// Rows start as the relation's description embedding (width
    /// `memory_width`) mapped to `width` by a seeded Gaussian projection.
    pub fn init(
        store: &mut ParamStore,
        kg: &KnowledgeGraph,
        memory_width: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from(derive_seed(seed, stream::INIT, 0x5e1));
        let scale = 1.0 / (memory_width as f64).sqrt();
        let proj: Vec<f64> = (0..memory_width * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        let project = |text: &str| -> Result<Vec<f64>> {
            let e = embed_description(text, memory_width, seed)?;
            Ok((0..width)
                .map(|c| (0..memory_width).map(|r| e[r] * proj[r * width + c]).sum())
                .collect())
        };
        let mut index = BTreeMap::new();
        let mut rows = Vec::new();
        for (i, (id, rec)) in kg.relations().iter().enumerate() {
            index.insert(*id, i);
            let r = project(&rec.description)?;
            rows.push(r.clone());
            rows.push(r);
        }
        rows.push(project(SELF_LOOP_DESCRIPTION)?);
        let param = store.add("gnn.relations", Tensor::from_rows(&rows)?)?;
        Ok(Self { param, index })
    }

    pub fn relation_count(&self) -> usize {
        self.index.len()
    }

    pub fn row(&self, relation: RelationId, direction: Direction) -> Result<usize> {
        let i = *self
            .index
            .get(&relation)
            .ok_or(Error::UnknownRelation(relation))?;
        Ok(match direction {
            Direction::Outgoing => 2 * i,
            Direction::Incoming => 2 * i + 1,
        })
    }

    pub fn self_row(&self) -> usize {
        2 * self.index.len()
    }
}

/// Trainable row `r_ij` for a relation traversed in `direction`.
pub fn relation_embedding(
    store: &ParamStore,
    table: &RelationTable,
    relation: RelationId,
    direction: Direction,
) -> Result<Vec<f64>> {
    let row = table.row(relation, direction)?;
    Ok(store.get(table.param).row_slice(row).to_vec())
}

#[derive(Clone, Debug)]
pub struct GnnLayerParams {
    pub attn_width: usize,
    pub query: ParamId,
    pub query_bias: ParamId,
    /// `2d × D`, applied to `[e_j, r_ij]`. No bias: a shared offset on every
    /// key moves each receiver's logits uniformly and cancels in the softmax.
    pub key: ParamId,
    /// `2d × d`, applied to `[e_j, r_ij]`.
    pub message: ParamId,
    pub message_bias: ParamId,
    pub node: ParamId,
    pub node_bias: ParamId,
}

impl GnnLayerParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        attn_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_width,
            query: store.add_uniform(format!("{prefix}.query"), width, attn_width, rng)?,
            query_bias: store.add_bias(format!("{prefix}.query_bias"), width, attn_width, rng)?,
            key: store.add_uniform(format!("{prefix}.key"), 2 * width, attn_width, rng)?,
            message: store.add_uniform(format!("{prefix}.message"), 2 * width, width, rng)?,
            message_bias: store.add_bias(format!("{prefix}.message_bias"), 2 * width, width, rng)?,
            node: store.add_uniform(format!("{prefix}.node"), width, width, rng)?,
            node_bias: store.add_bias(format!("{prefix}.node_bias"), width, width, rng)?,
        })
    }
}

/// One attention term: a message from `src` to `dst` carried by relation
/// table row `row`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub row: usize,
}

/// Every message of one layer, grouped by receiver. A receiver's list starts
/// with its self loop, followed by one entry per incident edge ordered by
/// (sender entity id, relation id, direction), so the order is independent
/// of local numbering. Head→tail messages use the outgoing row, tail→head
/// the incoming row.
pub fn messages(sub: &Subgraph, table: &RelationTable) -> Result<Vec<Message>> {
    let n = sub.len();
    let mut per_node: Vec<Vec<(EntityId, RelationId, Direction, Message)>> = vec![Vec::new(); n];
    for e in sub.edges() {
        let fwd = Message {
            src: e.head,
            dst: e.tail,
            row: table.row(e.relation, Direction::Outgoing)?,
        };
        let back = Message {
            src: e.tail,
            dst: e.head,
            row: table.row(e.relation, Direction::Incoming)?,
        };
        per_node[e.tail].push((sub.nodes()[e.head], e.relation, Direction::Outgoing, fwd));
        per_node[e.head].push((sub.nodes()[e.tail], e.relation, Direction::Incoming, back));
    }
    let mut out = Vec::with_capacity(n + 2 * sub.edges().len());
    for (i, mut list) in per_node.into_iter().enumerate() {
        out.push(Message {
            src: i,
            dst: i,
            row: table.self_row(),
        });
        list.sort_by_key(|&(ent, rel, dir, _)| (ent, rel, dir));
        out.extend(list.into_iter().map(|(_, _, _, m)| m));
    }
    Ok(out)
}

/// One layer; also returns the attention weight of every message (as an
/// `M × 1` column aligned with [`messages`]).
pub fn gnn_layer_with_attention(
    g: &mut Graph,
    bound: &BoundParams,
    sub: &Subgraph,
    table: &RelationTable,
    nodes: Var,
    p: &GnnLayerParams,
) -> Result<(Var, Var, Vec<Message>)> {
    let (k, _) = g.value(nodes).dims2()?;
    if k != sub.len() {
        return Err(Error::invalid(format!(
            "{k} node embeddings for a {}-node subgraph",
            sub.len()
        )));
    }
    let msgs = messages(sub, table)?;
    let src: Vec<usize> = msgs.iter().map(|m| m.src).collect();
    let dst: Vec<usize> = msgs.iter().map(|m| m.dst).collect();
    let rows: Vec<usize> = msgs.iter().map(|m| m.row).collect();

    let q = linear(g, nodes, bound[p.query], Some(bound[p.query_bias]))?;
    let senders = g.gather_rows(nodes, &src)?;
    let rels = g.gather_rows(bound[table.param], &rows)?;
    let joined = g.concat_cols(senders, rels)?;
    let keys = g.matmul(joined, bound[p.key])?;
    let values = linear(g, joined, bound[p.message], Some(bound[p.message_bias]))?;
    let qd = g.gather_rows(q, &dst)?;
    let prod = g.mul(qd, keys)?;
    let logits = g.sum_cols(prod)?;
    let logits = g.scale(logits, 1.0 / (p.attn_width as f64).sqrt())?;
    let alpha = g.segment_softmax(logits, &dst, k)?;
    let weighted = g.mul_col(values, alpha)?;
    let agg = g.segment_sum(weighted, &dst, k)?;
    let upd = linear(g, agg, bound[p.node], Some(bound[p.node_bias]))?;
    let out = g.add(upd, nodes)?;
    Ok((out, alpha, msgs))
}

pub fn gnn_layer(
    g: &mut Graph,
    bound: &BoundParams,
    sub: &Subgraph,
    table: &RelationTable,
    nodes: Var,
    p: &GnnLayerParams,
) -> Result<Var> {
    gnn_layer_with_attention(g, bound, sub, table, nodes, p).map(|(y, _, _)| y)
}

pub fn gnn_encode(
    g: &mut Graph,
    bound: &BoundParams,
    sub: &Subgraph,
    table: &RelationTable,
    mut nodes: Var,
    layers: &[GnnLayerParams],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("gnn stack must have at least one layer"));
    }
    for layer in layers {
        nodes = gnn_layer(g, bound, sub, table, nodes, layer)?;
    }
    Ok(nodes)
}
