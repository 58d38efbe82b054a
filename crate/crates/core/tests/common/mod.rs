#![allow(dead_code)]

use std::collections::BTreeMap;

use kvlp_core::gnn::{GnnLayerParams, RelationTable};
use kvlp_core::kg::SubgraphEdge;
use kvlp_core::rng::rng_from;
use kvlp_core::{Direction, KnowledgeGraph, ParamStore, Record, Subgraph, Tensor, Triplet};
use rand::Rng;

pub fn records(n: u64, prefix: &str) -> BTreeMap<u64, Record> {
    (0..n)
        .map(|i| (i, Record::new(format!("{prefix}{i}"), format!("{prefix} described as {i}"))))
        .collect()
}

/// A GNN under test: parameters, relation table and a subgraph over `n`
/// nodes whose entity ids are `10·i + 1`.
pub struct GnnCase {
    pub store: ParamStore,
    pub table: RelationTable,
    pub layers: Vec<GnnLayerParams>,
    pub sub: Subgraph,
    pub nodes: Tensor,
}

/// Random graph with `n` nodes, `relations` relation types and up to
/// `edges` distinct triplets (self loops allowed).
pub fn random_case(n: usize, relations: u64, edges: usize, width: usize, depth: usize, seed: u64) -> GnnCase {
    let mut rng = rng_from(seed);
    let mut set = std::collections::BTreeSet::new();
    for _ in 0..edges {
        set.insert((
            rng.random_range(0..n),
            rng.random_range(0..relations),
            rng.random_range(0..n),
        ));
    }
    let edges: Vec<SubgraphEdge> = set
        .into_iter()
        .map(|(head, relation, tail)| SubgraphEdge { head, relation, tail })
        .collect();
    build_case(n, relations, edges, width, depth, seed)
}

pub fn build_case(
    n: usize,
    relations: u64,
    edges: Vec<SubgraphEdge>,
    width: usize,
    depth: usize,
    seed: u64,
) -> GnnCase {
    let mut rng = rng_from(seed ^ 0x9e37);
    let ids: Vec<u64> = (0..n as u64).map(|i| 10 * i + 1).collect();
    let entities = ids
        .iter()
        .map(|&i| (i, Record::new(format!("e{i}"), format!("entity {i}"))))
        .collect();
    let triplets: Vec<Triplet> = edges
        .iter()
        .map(|e| Triplet::new(ids[e.head], e.relation, ids[e.tail]))
        .collect();
    let kg = KnowledgeGraph::new(entities, records(relations, "r"), triplets).unwrap();
    let mut store = ParamStore::new();
    let table = RelationTable::init(&mut store, &kg, 8, width, seed).unwrap();
    let layers = (0..depth)
        .map(|l| GnnLayerParams::init(&mut store, &format!("gnn{l}"), width, width, &mut rng).unwrap())
        .collect();
    let sub = Subgraph::from_parts(ids, vec![true; n], edges).unwrap();
    let nodes = Tensor::matrix(n, width, (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    GnnCase {
        store,
        table,
        layers,
        sub,
        nodes,
    }
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            let mut s = b.map_or(0.0, |b| b.get(0, c));
            for (r, xr) in x.iter().enumerate() {
                s += xr * w.get(r, c);
            }
            s
        })
        .collect()
}

/// One layer computed with scalar loops straight from the update rule:
/// returns the new node rows and, per receiver, its attention weights.
pub fn layer_oracle(
    store: &ParamStore,
    table: &RelationTable,
    p: &GnnLayerParams,
    sub: &Subgraph,
    nodes: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rel = store.get(table.param);
    let n = nodes.len();
    // (sender, relation row) for every term arriving at each receiver
    let mut terms: Vec<Vec<(usize, usize)>> = (0..n).map(|i| vec![(i, table.self_row())]).collect();
    for e in sub.edges() {
        terms[e.tail].push((e.head, table.row(e.relation, Direction::Outgoing).unwrap()));
        terms[e.head].push((e.tail, table.row(e.relation, Direction::Incoming).unwrap()));
    }
    let mut out = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    for i in 0..n {
        let q = affine(&nodes[i], store.get(p.query), Some(store.get(p.query_bias)));
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for &(j, row) in &terms[i] {
            let mut joined = nodes[j].clone();
            joined.extend_from_slice(rel.row_slice(row));
            let k = affine(&joined, store.get(p.key), None);
            let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            logits.push(dot / (p.attn_width as f64).sqrt());
            values.push(affine(&joined, store.get(p.message), Some(store.get(p.message_bias))));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let alpha: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let mut agg = vec![0.0; nodes[i].len()];
        for (a, v) in alpha.iter().zip(&values) {
            for (s, x) in agg.iter_mut().zip(v) {
                *s += a * x;
            }
        }
        let upd = affine(&agg, store.get(p.node), Some(store.get(p.node_bias)));
        out.push(upd.iter().zip(&nodes[i]).map(|(u, e)| u + e).collect());
        attention.push(alpha);
    }
    (out, attention)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (v - b.get(r, c)).abs()))
        .fold(0.0, f64::max)
}
