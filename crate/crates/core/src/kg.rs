//! Knowledge graph storage, TSV ingestion, neighbourhood expansion, edge
//! holdout and negative sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub type EntityId = u64;
pub type RelationId = u64;

/// Retries per negative before sampling is declared exhausted.
pub const NEGATIVE_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub description: String,
}

impl Record {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// The owning entity is the head of the triplet.
    Outgoing,
    /// The owning entity is the tail of the triplet.
    Incoming,
}

/// One adjacency entry. Field order gives the canonical sort:
/// neighbour id, then relation id, then direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Neighbor {
    pub neighbor: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: BTreeMap<EntityId, Record>,
    relations: BTreeMap<RelationId, Record>,
    triplets: Vec<Triplet>,
    triplet_set: HashSet<Triplet>,
    adjacency: HashMap<EntityId, Vec<Neighbor>>,
    entity_ids: Vec<EntityId>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triplets == other.triplets
    }
}

impl KnowledgeGraph {
    pub fn new(
        entities: BTreeMap<EntityId, Record>,
        relations: BTreeMap<RelationId, Record>,
        triplets: Vec<Triplet>,
    ) -> Result<Self> {
        let mut triplet_set = HashSet::with_capacity(triplets.len());
        let mut adjacency: HashMap<EntityId, Vec<Neighbor>> = HashMap::new();
        for t in &triplets {
            for e in [t.head, t.tail] {
                if !entities.contains_key(&e) {
                    return Err(Error::UnknownEntity(e));
                }
            }
            if !relations.contains_key(&t.relation) {
                return Err(Error::UnknownRelation(t.relation));
            }
            if !triplet_set.insert(*t) {
                return Err(Error::invalid(format!("duplicate triplet {t:?}")));
            }
            adjacency.entry(t.head).or_default().push(Neighbor {
                neighbor: t.tail,
                relation: t.relation,
                direction: Direction::Outgoing,
            });
            adjacency.entry(t.tail).or_default().push(Neighbor {
                neighbor: t.head,
                relation: t.relation,
                direction: Direction::Incoming,
            });
        }
        for list in adjacency.values_mut() {
            list.sort_unstable();
        }
        let entity_ids = entities.keys().copied().collect();
        Ok(Self {
            entities,
            relations,
            triplets,
            triplet_set,
            adjacency,
            entity_ids,
        })
    }

    /// Reads `entities.tsv`, `relations.tsv` and `triplets.tsv`.
    pub fn load(
        entities_path: impl AsRef<Path>,
        relations_path: impl AsRef<Path>,
        triplets_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let entities = read_records(entities_path.as_ref())?;
        let relations = read_records(relations_path.as_ref())?;
        let path = triplets_path.as_ref();
        let file = path.display().to_string();
        let text = fs::read_to_string(path)?;
        let mut triplets = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                file: file.clone(),
                line: i + 1,
                msg,
            };
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let mut ids = [0u64; 3];
            for (slot, f) in ids.iter_mut().zip(&fields) {
                *slot = f
                    .parse()
                    .map_err(|_| err(format!("non-integer id {f:?}")))?;
            }
            let t = Triplet::new(ids[0], ids[1], ids[2]);
            for e in [t.head, t.tail] {
                if !entities.contains_key(&e) {
                    return Err(err(format!("unknown entity {e}")));
                }
            }
            if !relations.contains_key(&t.relation) {
                return Err(err(format!("unknown relation {}", t.relation)));
            }
            if !seen.insert(t) {
                return Err(err(format!("duplicate triplet {}\t{}\t{}", t.head, t.relation, t.tail)));
            }
            triplets.push(t);
        }
        Self::new(entities, relations, triplets)
    }

    /// Loads the three standard file names from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let d = dir.as_ref();
        Self::load(
            d.join("entities.tsv"),
            d.join("relations.tsv"),
            d.join("triplets.tsv"),
        )
    }

    /// Writes `entities.tsv`, `relations.tsv` and `triplets.tsv` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let d = dir.as_ref();
        fs::create_dir_all(d)?;
        fs::write(d.join("entities.tsv"), records_tsv(&self.entities)?)?;
        fs::write(d.join("relations.tsv"), records_tsv(&self.relations)?)?;
        let mut out = String::new();
        for t in &self.triplets {
            let _ = writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail);
        }
        fs::write(d.join("triplets.tsv"), out)?;
        Ok(())
    }

    pub fn entity(&self, id: EntityId) -> Result<&Record> {
        self.entities.get(&id).ok_or(Error::UnknownEntity(id))
    }

    pub fn relation(&self, id: RelationId) -> Result<&Record> {
        self.relations.get(&id).ok_or(Error::UnknownRelation(id))
    }

    pub fn entities(&self) -> &BTreeMap<EntityId, Record> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeMap<RelationId, Record> {
        &self.relations
    }

    /// Entity ids in ascending order.
    pub fn entity_ids(&self) -> &[EntityId] {
        &self.entity_ids
    }

    pub fn relation_ids(&self) -> Vec<RelationId> {
        self.relations.keys().copied().collect()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplet_set.contains(t)
    }

    pub fn has_entity(&self, id: EntityId) -> bool {
        self.entities.contains_key(&id)
    }

    /// Incident edges of `entity` in both directions, in canonical order.
    pub fn neighbors(&self, entity: EntityId) -> Result<&[Neighbor]> {
        if !self.has_entity(entity) {
            return Err(Error::UnknownEntity(entity));
        }
        Ok(self.adjacency.get(&entity).map_or(&[], Vec::as_slice))
    }

    /// Same entities and relations with a different triplet list.
    pub fn with_triplets(&self, triplets: Vec<Triplet>) -> Result<Self> {
        Self::new(self.entities.clone(), self.relations.clone(), triplets)
    }
}

fn read_records(path: &Path) -> Result<BTreeMap<u64, Record>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            file: file.clone(),
            line: i + 1,
            msg,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("non-integer id {:?}", fields[0])))?;
        if out.insert(id, Record::new(fields[1], fields[2])).is_some() {
            return Err(err(format!("duplicate id {id}")));
        }
    }
    Ok(out)
}

fn records_tsv(records: &BTreeMap<u64, Record>) -> Result<String> {
    let mut out = String::new();
    for (id, r) in records {
        if [&r.name, &r.description]
            .iter()
            .any(|f| f.contains(['\t', '\n', '\r']))
        {
            return Err(Error::invalid(format!("record {id} contains a tab or newline")));
        }
        let _ = writeln!(out, "{id}\t{}\t{}", r.name, r.description);
    }
    Ok(out)
}

/// An edge inside a [`Subgraph`], by local node index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SubgraphEdge {
    pub head: usize,
    pub relation: RelationId,
    pub tail: usize,
}

/// Seeds plus sampled one-hop neighbours and every triplet among them.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    nodes: Vec<EntityId>,
    is_seed: Vec<bool>,
    edges: Vec<SubgraphEdge>,
    local: HashMap<EntityId, usize>,
}

impl Subgraph {
    /// Builds a subgraph from explicit parts; edge endpoints must be valid
    /// local indices and node ids distinct.
    pub fn from_parts(
        nodes: Vec<EntityId>,
        is_seed: Vec<bool>,
        edges: Vec<SubgraphEdge>,
    ) -> Result<Self> {
        if is_seed.len() != nodes.len() {
            return Err(Error::invalid("seed flags must match node count"));
        }
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, &n) in nodes.iter().enumerate() {
            if local.insert(n, i).is_some() {
                return Err(Error::invalid(format!("entity {n} appears twice in subgraph")));
            }
        }
        if let Some(e) = edges
            .iter()
            .find(|e| e.head >= nodes.len() || e.tail >= nodes.len())
        {
            return Err(Error::invalid(format!("edge endpoint out of range: {e:?}")));
        }
        Ok(Self {
            nodes,
            is_seed,
            edges,
            local,
        })
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_seed(&self, local: usize) -> bool {
        self.is_seed[local]
    }

    pub fn seed_count(&self) -> usize {
        self.is_seed.iter().filter(|&&s| s).count()
    }

    pub fn edges(&self) -> &[SubgraphEdge] {
        &self.edges
    }

    pub fn local_index(&self, entity: EntityId) -> Option<usize> {
        self.local.get(&entity).copied()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.edges
            .iter()
            .map(|e| Triplet::new(self.nodes[e.head], e.relation, self.nodes[e.tail]))
            .collect()
    }

    /// Copy with the given triplets removed from the edge list.
    pub fn without(&self, removed: &[Triplet]) -> Self {
        let drop: HashSet<&Triplet> = removed.iter().collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| {
                let t = Triplet::new(self.nodes[e.head], e.relation, self.nodes[e.tail]);
                !drop.contains(&t)
            })
            .copied()
            .collect();
        Self {
            edges,
            ..self.clone()
        }
    }

    /// Relabels nodes so that old local index `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes.len();
        let mut check = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut check[p], true)) {
            return Err(Error::invalid("not a permutation"));
        }
        let mut nodes = vec![0; n];
        let mut is_seed = vec![false; n];
        for i in 0..n {
            nodes[perm[i]] = self.nodes[i];
            is_seed[perm[i]] = self.is_seed[i];
        }
        let edges = self
            .edges
            .iter()
            .map(|e| SubgraphEdge {
                head: perm[e.head],
                relation: e.relation,
                tail: perm[e.tail],
            })
            .collect();
        Self::from_parts(nodes, is_seed, edges)
    }
}

/// Seeds (deduplicated, in order) plus up to `per_node_cap` distinct one-hop
/// neighbours per seed, sampled without replacement under `seed`.
pub fn expand_subgraph(
    kg: &KnowledgeGraph,
    seeds: &[EntityId],
    per_node_cap: usize,
    seed: u64,
) -> Result<Subgraph> {
    if seeds.is_empty() {
        return Err(Error::invalid("expand_subgraph needs at least one seed"));
    }
    if per_node_cap == 0 {
        return Err(Error::invalid("per_node_cap must be >= 1"));
    }
    let mut nodes: Vec<EntityId> = Vec::new();
    let mut in_set = HashSet::new();
    for &s in seeds {
        if !kg.has_entity(s) {
            return Err(Error::UnknownEntity(s));
        }
        if in_set.insert(s) {
            nodes.push(s);
        }
    }
    let n_seeds = nodes.len();
    let mut rng = rng_from(seed);
    for si in 0..n_seeds {
        let s = nodes[si];
        let mut distinct: Vec<EntityId> = kg
            .neighbors(s)?
            .iter()
            .map(|n| n.neighbor)
            .filter(|&n| n != s)
            .collect();
        distinct.dedup(); // sorted by neighbour id already
        let take = per_node_cap.min(distinct.len());
        let mut picked: Vec<usize> = sample(&mut rng, distinct.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            if in_set.insert(distinct[i]) {
                nodes.push(distinct[i]);
            }
        }
    }
    let local: HashMap<EntityId, usize> = nodes.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut edges = Vec::new();
    for (i, &e) in nodes.iter().enumerate() {
        for nb in kg.neighbors(e)? {
            if nb.direction != Direction::Outgoing {
                continue;
            }
            if let Some(&j) = local.get(&nb.neighbor) {
                edges.push(SubgraphEdge {
                    head: i,
                    relation: nb.relation,
                    tail: j,
                });
            }
        }
    }
    let is_seed = (0..nodes.len()).map(|i| i < n_seeds).collect();
    Subgraph::from_parts(nodes, is_seed, edges)
}

/// `round(rate · n)`.
pub fn holdout_count(n: usize, rate: f64) -> usize {
    (rate * n as f64).round() as usize
}

/// Splits `triplets` into (visible, held out) with exactly
/// [`holdout_count`] held out, chosen uniformly without replacement.
/// Both halves keep the input order.
pub fn split_triplets(
    triplets: &[Triplet],
    drop_rate: f64,
    seed: u64,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    if !(drop_rate > 0.0 && drop_rate < 1.0) {
        return Err(Error::invalid(format!("drop rate {drop_rate} outside (0, 1)")));
    }
    let k = holdout_count(triplets.len(), drop_rate);
    let mut rng = rng_from(seed);
    let mut held = vec![false; triplets.len()];
    for i in sample(&mut rng, triplets.len(), k) {
        held[i] = true;
    }
    let (mut visible, mut out) = (Vec::new(), Vec::new());
    for (t, h) in triplets.iter().zip(held) {
        if h {
            out.push(*t);
        } else {
            visible.push(*t);
        }
    }
    Ok((visible, out))
}

#[derive(Clone, Debug)]
pub struct EdgeHoldout {
    pub visible: KnowledgeGraph,
    pub held_out: Vec<Triplet>,
    pub drop_rate: f64,
}

pub fn holdout_edges(kg: &KnowledgeGraph, drop_rate: f64, seed: u64) -> Result<EdgeHoldout> {
    let (visible, held_out) = split_triplets(kg.triplets(), drop_rate, seed)?;
    Ok(EdgeHoldout {
        visible: kg.with_triplets(visible)?,
        held_out,
        drop_rate,
    })
}

/// `n` corruptions of `positive`: a fair coin picks head or tail, which is
/// replaced by a uniform entity until the result is not a triplet of `kg`.
pub fn sample_negatives(
    kg: &KnowledgeGraph,
    positive: Triplet,
    n: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::invalid("negative count must be >= 1"));
    }
    let ids = kg.entity_ids();
    if ids.is_empty() {
        return Err(Error::Sampling("graph has no entities".into()));
    }
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let corrupt_head = rng.random_bool(0.5);
        let mut found = None;
        for _ in 0..NEGATIVE_RETRIES {
            let e = ids[rng.random_range(0..ids.len())];
            let cand = if corrupt_head {
                Triplet::new(e, positive.relation, positive.tail)
            } else {
                Triplet::new(positive.head, positive.relation, e)
            };
            if !kg.contains(&cand) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(t) => out.push(t),
            None => {
                return Err(Error::Sampling(format!(
                    "no valid corruption of {positive:?} after {NEGATIVE_RETRIES} tries"
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: u64) -> BTreeMap<u64, Record> {
        (0..n).map(|i| (i, Record::new(format!("e{i}"), format!("entity {i}")))).collect()
    }

    fn small() -> KnowledgeGraph {
        KnowledgeGraph::new(
            records(3),
            records(1),
            vec![Triplet::new(0, 0, 1), Triplet::new(1, 0, 2)],
        )
        .unwrap()
    }

    #[test]
    fn adjacency_indexes_both_directions() {
        let kg = small();
        let degree: usize = (0..3).map(|e| kg.neighbors(e).unwrap().len()).sum();
        assert_eq!(degree, 4);
        assert_eq!(
            kg.neighbors(0).unwrap(),
            &[Neighbor {
                neighbor: 1,
                relation: 0,
                direction: Direction::Outgoing
            }]
        );
    }

    #[test]
    fn isolated_and_unknown_entities() {
        let kg = KnowledgeGraph::new(records(2), records(1), vec![]).unwrap();
        assert!(kg.neighbors(1).unwrap().is_empty());
        assert!(matches!(kg.neighbors(5), Err(Error::UnknownEntity(5))));
    }

    #[test]
    fn rejects_dangling_and_duplicate_triplets() {
        assert!(KnowledgeGraph::new(records(2), records(1), vec![Triplet::new(0, 0, 9)]).is_err());
        assert!(KnowledgeGraph::new(records(2), records(1), vec![Triplet::new(0, 3, 1)]).is_err());
        let t = Triplet::new(0, 0, 1);
        assert!(KnowledgeGraph::new(records(2), records(1), vec![t, t]).is_err());
    }

    #[test]
    fn isolated_seed_gives_single_node() {
        let kg = KnowledgeGraph::new(records(2), records(1), vec![]).unwrap();
        let sub = expand_subgraph(&kg, &[1], 16, 0).unwrap();
        assert_eq!(sub.nodes(), &[1]);
        assert!(sub.edges().is_empty());
        assert!(sub.is_seed(0));
    }

    #[test]
    fn holdout_rejects_bad_rates() {
        let kg = small();
        assert!(holdout_edges(&kg, 0.0, 1).is_err());
        assert!(holdout_edges(&kg, 1.0, 1).is_err());
    }

    #[test]
    fn dense_graph_exhausts_negatives() {
        let all = (0..2)
            .flat_map(|h| (0..2).map(move |t| Triplet::new(h, 0, t)))
            .collect();
        let kg = KnowledgeGraph::new(records(2), records(1), all).unwrap();
        let err = sample_negatives(&kg, Triplet::new(0, 0, 1), 1, 3).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn without_drops_exactly_the_listed_edges() {
        let kg = small();
        let sub = expand_subgraph(&kg, &[1], 4, 0).unwrap();
        assert_eq!(sub.edges().len(), 2);
        let rest = sub.without(&[Triplet::new(0, 0, 1)]);
        assert_eq!(rest.triplets(), vec![Triplet::new(1, 0, 2)]);
        assert_eq!(rest.nodes(), sub.nodes());
    }
}
