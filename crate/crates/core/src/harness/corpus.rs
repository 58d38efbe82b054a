//! Seeded synthetic corpus: a clustered knowledge graph, images whose patches
//! carry noisy copies of entity memory rows, and captions naming the
//! pictured triplet.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::Config;
use super::io::write_tensor;
use crate::encoders::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Record, Triplet};
use crate::retriever::{build_memory, EntityMemory};
use crate::rng::{derive_seed, rng_from, stream, Rng as SeededRng};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
/// Token of relation `r` is `RELATION_TOKEN_BASE + r`.
pub const RELATION_TOKEN_BASE: usize = 50;
/// Token of entity `e` is `ENTITY_TOKEN_BASE + e`.
pub const ENTITY_TOKEN_BASE: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `H × W × C`.
    pub image: Tensor,
    /// Caption with a leading CLS.
    pub tokens: Vec<usize>,
    /// Entities drawn in the image (head, then tail if different).
    pub ground_truth: Vec<EntityId>,
    pub triplet: Triplet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub kg: KnowledgeGraph,
    pub memory: EntityMemory,
    pub examples: Vec<Example>,
    /// Latent cluster of each entity.
    pub clusters: Vec<usize>,
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "qua", "bri", "dor", "fen", "gil", "hox", "jun", "kel",
    "mar", "nyx", "pel", "sor", "tam", "ulm", "wex",
];

fn pseudo_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

fn unique_word(rng: &mut impl Rng, taken: &mut HashSet<String>, syllables: usize) -> String {
    let mut w = pseudo_word(rng, syllables);
    while !taken.insert(w.clone()) {
        w.push_str(SYLLABLES[rng.random_range(0..SYLLABLES.len())]);
    }
    w
}

/// A random pairing of `0..n` with itself (odd one out maps to itself).
fn involution(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut map: Vec<usize> = (0..n).collect();
    for pair in order.chunks(2) {
        if let [a, b] = *pair {
            map[a] = b;
            map[b] = a;
        }
    }
    map
}

/// Entities `0..n` fall into latent clusters; relation `r` links cluster
/// `c` to `partner_r(c)` under a per-relation involution, so the graph has
/// structure a symmetric scorer can learn. Triplets beyond what the
/// structure supplies are filled uniformly.
pub fn generate_kg(config: &Config, seed: u64) -> Result<(KnowledgeGraph, Vec<usize>)> {
    let n = config.entities;
    let r = config.relations;
    let capacity = (n as u128) * (n as u128) * (r as u128);
    if config.triplets as u128 > capacity {
        return Err(Error::Config(format!(
            "{} triplets exceed the {capacity} possible over {n} entities and {r} relations",
            config.triplets
        )));
    }
    let mut rng = rng_from(derive_seed(seed, stream::CORPUS, 0));
    let clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.clusters)).collect();
    let mut members = vec![Vec::new(); config.clusters];
    for (e, &c) in clusters.iter().enumerate() {
        members[c].push(e);
    }
    let mut taken = HashSet::new();
    let cluster_words: Vec<String> = (0..config.clusters).map(|_| unique_word(&mut rng, &mut taken, 2)).collect();
    let mut entities = BTreeMap::new();
    for (e, &c) in clusters.iter().enumerate() {
        let name = unique_word(&mut rng, &mut taken, 3);
        let extra = pseudo_word(&mut rng, 2);
        let desc = format!("{name} is a {} {extra} thing", cluster_words[c]);
        entities.insert(e as EntityId, Record::new(name, desc));
    }
    let mut relations = BTreeMap::new();
    let mut partners = Vec::with_capacity(r);
    for rel in 0..r {
        let p = involution(&mut rng, config.clusters);
        let name = unique_word(&mut rng, &mut taken, 2);
        let desc = format!("{name} joins {} with {}", cluster_words[0], cluster_words[p[0]]);
        relations.insert(rel as u64, Record::new(name, desc));
        partners.push(p);
    }

    let mut set = HashSet::new();
    let mut triplets = Vec::with_capacity(config.triplets);
    let mut attempts = 0;
    while triplets.len() < config.triplets && attempts < 20 * config.triplets {
        attempts += 1;
        let h = rng.random_range(0..n);
        let rel = rng.random_range(0..r);
        let pool = &members[partners[rel][clusters[h]]];
        if pool.is_empty() {
            continue;
        }
        let t = pool[rng.random_range(0..pool.len())];
        let tr = Triplet::new(h as u64, rel as u64, t as u64);
        if set.insert(tr) {
            triplets.push(tr);
        }
    }
    if triplets.len() < config.triplets {
        let mut rest: Vec<Triplet> = (0..n as u64)
            .flat_map(|h| (0..r as u64).flat_map(move |rel| (0..n as u64).map(move |t| Triplet::new(h, rel, t))))
            .filter(|t| !set.contains(t))
            .collect();
        rest.shuffle(&mut rng);
        rest.truncate(config.triplets - triplets.len());
        triplets.extend(rest);
    }
    Ok((KnowledgeGraph::new(entities, relations, triplets)?, clusters))
}

/// Patch grid for an example: the left half of the patch columns shows the
/// head's memory row, the right half the tail's, each coordinate repeating
/// the row cyclically, plus `N(0, noise²)`.
fn render(config: &Config, memory: &EntityMemory, t: &Triplet, rng: &mut SeededRng) -> Result<Tensor> {
    let side = config.image_size / config.patch;
    let pdim = config.patch_dim();
    let normal = Normal::new(0.0, config.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let head = memory.row(t.head)?;
    let tail = memory.row(t.tail)?;
    let mut data = Vec::with_capacity(side * side * pdim);
    for i in 0..side * side {
        let col = i % side;
        let src = if side > 1 && col >= side / 2 { tail } else { head };
        for j in 0..pdim {
            let noise = if config.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push(src[j % src.len()] + noise);
        }
    }
    let patches = Tensor::matrix(side * side, pdim, data)?;
    unpatchify(&patches, config.image_size, config.image_size, config.channels, config.patch)
}

/// Caption skeletons shared by the whole corpus: fixed filler words with a
/// three-token slot for the pictured (head, relation, tail).
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionTemplate {
    pub words: Vec<usize>,
    pub slot: usize,
}

pub const CAPTION_TEMPLATES: usize = 8;

fn templates(config: &Config, rng: &mut SeededRng) -> Vec<CaptionTemplate> {
    let lo = (config.max_caption / 2).max(3).min(config.max_caption);
    let filler_lo = ENTITY_TOKEN_BASE + config.entities;
    (0..CAPTION_TEMPLATES)
        .map(|_| {
            let len = rng.random_range(lo..=config.max_caption);
            let words = (0..len).map(|_| rng.random_range(filler_lo..config.vocab)).collect();
            let slot = rng.random_range(0..=len - 3);
            CaptionTemplate { words, slot }
        })
        .collect()
}

fn caption(template: &CaptionTemplate, t: &Triplet) -> Vec<usize> {
    let mut words = template.words.clone();
    let at = template.slot;
    words[at] = ENTITY_TOKEN_BASE + t.head as usize;
    words[at + 1] = RELATION_TOKEN_BASE + t.relation as usize;
    words[at + 2] = ENTITY_TOKEN_BASE + t.tail as usize;
    std::iter::once(CLS).chain(words).collect()
}

pub fn generate_corpus(config: &Config, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    if config.relations > ENTITY_TOKEN_BASE - RELATION_TOKEN_BASE {
        return Err(Error::Config(format!(
            "at most {} relations fit the token layout",
            ENTITY_TOKEN_BASE - RELATION_TOKEN_BASE
        )));
    }
    if config.vocab <= ENTITY_TOKEN_BASE + config.entities {
        return Err(Error::Config(format!(
            "vocab {} leaves no filler tokens after {} entity tokens",
            config.vocab, config.entities
        )));
    }
    if config.max_caption < 3 {
        return Err(Error::Config("max_caption must be >= 3".into()));
    }
    let (kg, clusters) = generate_kg(config, seed)?;
    if kg.triplets().is_empty() {
        return Err(Error::Config("corpus needs at least one triplet".into()));
    }
    let memory = build_memory(&kg, config.memory_width, seed)?;
    let templates = templates(config, &mut rng_from(derive_seed(seed, stream::CORPUS, 1)));
    let mut examples = Vec::with_capacity(config.examples);
    for i in 0..config.examples {
        let mut rng = rng_from(derive_seed(seed, stream::EXAMPLE, i as u64));
        let t = kg.triplets()[rng.random_range(0..kg.triplets().len())];
        let image = render(config, &memory, &t, &mut rng)?;
        let tokens = caption(&templates[rng.random_range(0..templates.len())], &t);
        let mut ground_truth = vec![t.head];
        if t.tail != t.head {
            ground_truth.push(t.tail);
        }
        examples.push(Example {
            image,
            tokens,
            ground_truth,
            triplet: t,
        });
    }
    Ok(SyntheticCorpus {
        kg,
        memory,
        examples,
        clusters,
    })
}

/// Query built straight from raw patches: coordinate `c` sums every patch
/// value at an index congruent to `c` mod `memory_width`. On noiseless
/// images this is a positive multiple of the pictured memory row.
pub fn oracle_queries(patches: &Tensor, memory_width: usize) -> Result<Tensor> {
    let n = patches.dims2()?.0;
    let mut data = vec![0.0; n * memory_width];
    for i in 0..n {
        for (j, v) in patches.row_slice(i).iter().enumerate() {
            data[i * memory_width + j % memory_width] += v;
        }
    }
    Tensor::matrix(n, memory_width, data)
}

impl SyntheticCorpus {
    pub fn patches(&self, example: usize, patch: usize) -> Result<Tensor> {
        patchify(&self.examples[example].image, patch)
    }

    /// Writes the graph TSVs, `images/NNNN.tensor`, and `captions.tsv`
    /// (index, ground-truth ids, caption tokens).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let d = dir.as_ref();
        self.kg.save_dir(d.join("kg"))?;
        fs::create_dir_all(d.join("images"))?;
        let mut captions = String::new();
        for (i, ex) in self.examples.iter().enumerate() {
            write_tensor(d.join("images").join(format!("{i:04}.tensor")), &ex.image)?;
            let gt: Vec<String> = ex.ground_truth.iter().map(u64::to_string).collect();
            let toks: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
            captions.push_str(&format!("{i}\t{}\t{}\n", gt.join(","), toks.join(" ")));
        }
        fs::write(d.join("captions.tsv"), captions)?;
        Ok(())
    }
}
