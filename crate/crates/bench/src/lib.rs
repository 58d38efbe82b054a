//! Shared fixtures for the criterion benches.

use std::collections::BTreeSet;

use kvlp_core::gnn::{GnnLayerParams, RelationTable};
use kvlp_core::harness::{generate_corpus, Config, SyntheticCorpus, Trainer};
use kvlp_core::kg::SubgraphEdge;
use kvlp_core::rng::rng_from;
use kvlp_core::{EntityMemory, KnowledgeGraph, ParamStore, Record, Subgraph, Tensor, Triplet};
use rand::Rng as _;

/// `rows × cols` with entries uniform in [-1, 1).
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("valid dims")
}

/// Memory of `entities` uniform rows of width `dim`, ids `0..entities`.
pub fn memory(entities: usize, dim: usize, seed: u64) -> EntityMemory {
    let m = uniform(entities, dim, seed);
    let rows = (0..entities).map(|i| m.row_slice(i).to_vec()).collect();
    EntityMemory::new((0..entities as u64).collect(), rows).expect("valid memory")
}

pub struct GnnFixture {
    pub store: ParamStore,
    pub table: RelationTable,
    pub layer: GnnLayerParams,
    pub sub: Subgraph,
    pub nodes: Tensor,
}

/// One GNN layer over `n` nodes and up to `edges` random edges.
pub fn gnn_fixture(n: usize, relations: u64, edges: usize, width: usize, seed: u64) -> GnnFixture {
    let mut rng = rng_from(seed);
    let mut set = BTreeSet::new();
    for _ in 0..edges {
        set.insert((rng.random_range(0..n), rng.random_range(0..relations), rng.random_range(0..n)));
    }
    let edges: Vec<SubgraphEdge> = set
        .into_iter()
        .map(|(head, relation, tail)| SubgraphEdge { head, relation, tail })
        .collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let entities = ids.iter().map(|&i| (i, Record::new(format!("e{i}"), format!("entity {i}")))).collect();
    let relations = (0..relations).map(|r| (r, Record::new(format!("r{r}"), format!("relation {r}")))).collect();
    let triplets = edges.iter().map(|e| Triplet::new(e.head as u64, e.relation, e.tail as u64)).collect();
    let kg = KnowledgeGraph::new(entities, relations, triplets).expect("valid graph");
    let mut store = ParamStore::new();
    let table = RelationTable::init(&mut store, &kg, width, width, seed).expect("relation table");
    let layer = GnnLayerParams::init(&mut store, "gnn", width, width, &mut rng).expect("layer");
    let sub = Subgraph::from_parts(ids, vec![true; n], edges).expect("subgraph");
    let nodes = uniform(n, width, seed ^ 1);
    GnnFixture {
        store,
        table,
        layer,
        sub,
        nodes,
    }
}

/// Default config shrunk to a few dozen entities.
pub fn small_config() -> Config {
    Config {
        entities: 40,
        relations: 4,
        triplets: 120,
        examples: 12,
        batch: 3,
        negatives: 8,
        k_final: 6,
        per_node_cap: 2,
        lr: 1e-3,
        ..Config::default()
    }
}

pub fn trainer(config: &Config) -> (Trainer, SyntheticCorpus) {
    let corpus = generate_corpus(config, config.seed).expect("corpus");
    let t = Trainer::new(config, &corpus).expect("trainer");
    (t, corpus)
}
