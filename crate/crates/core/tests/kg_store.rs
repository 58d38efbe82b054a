use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;

use kvlp_core::harness::corpus::generate_kg;
use kvlp_core::harness::Config;
use kvlp_core::kg::{expand_subgraph, holdout_edges, sample_negatives, split_triplets, Neighbor};
use kvlp_core::rng::rng_from;
use kvlp_core::{Direction, Error, KnowledgeGraph, Record, Triplet};
use proptest::prelude::*;
use rand::Rng;

fn records(n: u64, prefix: &str) -> BTreeMap<u64, Record> {
    (0..n)
        .map(|i| (i, Record::new(format!("{prefix}{i}"), format!("{prefix} number {i}"))))
        .collect()
}

fn random_kg(entities: u64, relations: u64, triplets: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = rng_from(seed);
    let mut set = BTreeSet::new();
    let cap = (entities * entities * relations) as usize;
    while set.len() < triplets.min(cap) {
        set.insert(Triplet::new(
            rng.random_range(0..entities),
            rng.random_range(0..relations),
            rng.random_range(0..entities),
        ));
    }
    KnowledgeGraph::new(records(entities, "e"), records(relations, "r"), set.into_iter().collect()).unwrap()
}

fn write_files(dir: &std::path::Path, entities: &str, relations: &str, triplets: &str) {
    fs::write(dir.join("entities.tsv"), entities).unwrap();
    fs::write(dir.join("relations.tsv"), relations).unwrap();
    fs::write(dir.join("triplets.tsv"), triplets).unwrap();
}

#[test]
fn small_graph_from_files_indexes_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    write_files(
        dir.path(),
        "0\ta\tfirst\n1\tb\tsecond\n2\tc\tthird\n",
        "0\tknows\tknows someone\n",
        "0\t0\t1\n1\t0\t2\n",
    );
    let kg = KnowledgeGraph::load_dir(dir.path()).unwrap();
    let degree: usize = kg.entity_ids().iter().map(|&e| kg.neighbors(e).unwrap().len()).sum();
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
fn dangling_id_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\ta\tx\n1\tb\ty\n", "0\tr\tz\n", "0\t0\t1\n0\t0\t99\n");
    match KnowledgeGraph::load_dir(dir.path()).unwrap_err() {
        Error::Parse { file, line, msg } => {
            assert!(file.ends_with("triplets.tsv"));
            assert_eq!(line, 2);
            assert!(msg.contains("99"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn malformed_rows_are_rejected_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\ta\tx\nzero\tb\ty\n", "0\tr\tz\n", "");
    match KnowledgeGraph::load_dir(dir.path()).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
    write_files(dir.path(), "0\ta\tx\n", "0\tr\tz\n", "0\t0\n");
    assert!(matches!(KnowledgeGraph::load_dir(dir.path()), Err(Error::Parse { line: 1, .. })));
    write_files(dir.path(), "0\ta\tx\n0\tb\ty\n", "0\tr\tz\n", "");
    match KnowledgeGraph::load_dir(dir.path()).unwrap_err() {
        Error::Parse { line, msg, .. } => {
            assert_eq!(line, 2);
            assert!(msg.contains("duplicate"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn synthetic_graph_round_trips_through_tsv() {
    let config = Config::default();
    let (kg, _) = generate_kg(&config, config.seed).unwrap();
    assert_eq!((kg.entities().len(), kg.relations().len(), kg.triplets().len()), (200, 10, 800));
    let dir = tempfile::tempdir().unwrap();
    kg.save_dir(dir.path()).unwrap();
    let back = KnowledgeGraph::load_dir(dir.path()).unwrap();
    assert_eq!(back, kg);
}

#[test]
fn hub_adjacency_matches_a_linear_scan() {
    let config = Config::default();
    let (kg, _) = generate_kg(&config, config.seed).unwrap();
    let hub = *kg
        .entity_ids()
        .iter()
        .max_by_key(|&&e| (kg.neighbors(e).unwrap().len(), std::cmp::Reverse(e)))
        .unwrap();
    let mut scan = Vec::new();
    for t in kg.triplets() {
        if t.head == hub {
            scan.push(Neighbor {
                neighbor: t.tail,
                relation: t.relation,
                direction: Direction::Outgoing,
            });
        }
        if t.tail == hub {
            scan.push(Neighbor {
                neighbor: t.head,
                relation: t.relation,
                direction: Direction::Incoming,
            });
        }
    }
    scan.sort();
    assert_eq!(kg.neighbors(hub).unwrap(), scan.as_slice());
}

#[test]
fn expansion_of_a_small_star_keeps_every_neighbour() {
    // 0 has neighbours 1, 2, 3; 4 hangs off 1 and must not appear
    let ts = vec![
        Triplet::new(0, 0, 1),
        Triplet::new(2, 0, 0),
        Triplet::new(0, 1, 3),
        Triplet::new(1, 0, 2),
        Triplet::new(1, 1, 4),
    ];
    let kg = KnowledgeGraph::new(records(5, "e"), records(2, "r"), ts).unwrap();
    let sub = expand_subgraph(&kg, &[0], 16, 3).unwrap();
    assert_eq!(sub.len(), 4);
    assert_eq!(sub.nodes()[0], 0);
    let nodes: HashSet<u64> = sub.nodes().iter().copied().collect();
    assert_eq!(nodes, [0, 1, 2, 3].into_iter().collect());
    let mut got = sub.triplets();
    got.sort();
    let mut want = vec![Triplet::new(0, 0, 1), Triplet::new(2, 0, 0), Triplet::new(0, 1, 3), Triplet::new(1, 0, 2)];
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn capped_expansion_of_a_hub_is_reproducible() {
    let ts: Vec<Triplet> = (1..=50).map(|i| Triplet::new(0, 0, i)).collect();
    let kg = KnowledgeGraph::new(records(51, "e"), records(1, "r"), ts).unwrap();
    let a = expand_subgraph(&kg, &[0], 16, 42).unwrap();
    let b = expand_subgraph(&kg, &[0], 16, 42).unwrap();
    assert_eq!(a.len(), 17);
    assert_eq!(a, b);
    assert_eq!(a.seed_count(), 1);
    assert_ne!(a.nodes(), expand_subgraph(&kg, &[0], 16, 43).unwrap().nodes());
}

#[test]
fn holdout_of_eight_hundred_drops_one_hundred_twenty() {
    let config = Config::default();
    let (kg, _) = generate_kg(&config, config.seed).unwrap();
    let h = holdout_edges(&kg, 0.15, 5).unwrap();
    assert_eq!(h.held_out.len(), 120);
    assert_eq!(h.visible.triplets().len(), 680);
    let again = holdout_edges(&kg, 0.15, 5).unwrap();
    assert_eq!(again.held_out, h.held_out);
}

#[test]
fn negatives_avoid_true_triplets() {
    let config = Config::default();
    let (kg, _) = generate_kg(&config, config.seed).unwrap();
    let p = kg.triplets()[17];
    let negs = sample_negatives(&kg, p, 128, 9).unwrap();
    assert_eq!(negs.len(), 128);
    for n in &negs {
        assert!(!kg.contains(n));
        assert_eq!(n.relation, p.relation);
        assert!(n.head == p.head || n.tail == p.tail);
    }
}

#[test]
fn saturated_graph_exhausts_negative_sampling() {
    let ts = vec![
        Triplet::new(0, 0, 0),
        Triplet::new(0, 0, 1),
        Triplet::new(1, 0, 0),
        Triplet::new(1, 0, 1),
    ];
    let kg = KnowledgeGraph::new(records(2, "e"), records(1, "r"), ts).unwrap();
    assert!(matches!(sample_negatives(&kg, Triplet::new(0, 0, 1), 1, 0), Err(Error::Sampling(_))));
}

#[test]
fn head_and_tail_corruption_are_equally_likely() {
    let kg = random_kg(500, 3, 400, 1);
    let p = kg.triplets()[0];
    let negs = sample_negatives(&kg, p, 10_000, 77).unwrap();
    // a corruption that redraws the original endpoint would be a positive,
    // so each negative differs in exactly one endpoint
    let heads = negs.iter().filter(|n| n.head != p.head).count();
    let frac = heads as f64 / negs.len() as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tsv_round_trip_is_identity(n in 1u64..30, r in 1u64..5, t in 0usize..80, seed in any::<u64>()) {
        let kg = random_kg(n, r, t, seed);
        let dir = tempfile::tempdir().unwrap();
        kg.save_dir(dir.path()).unwrap();
        let back = KnowledgeGraph::load_dir(dir.path()).unwrap();
        prop_assert_eq!(back, kg);
    }

    #[test]
    fn subgraph_edges_are_all_triplets_inside_the_node_set(
        n in 2u64..40,
        t in 1usize..150,
        seeds in prop::collection::vec(0u64..40, 1..6),
        cap in 1usize..6,
        seed in any::<u64>(),
    ) {
        let kg = random_kg(n, 3, t, seed);
        let seeds: Vec<u64> = seeds.into_iter().map(|s| s % n).collect();
        let sub = expand_subgraph(&kg, &seeds, cap, seed ^ 1).unwrap();
        let nodes: HashSet<u64> = sub.nodes().iter().copied().collect();
        let mut want: Vec<Triplet> = kg
            .triplets()
            .iter()
            .filter(|t| nodes.contains(&t.head) && nodes.contains(&t.tail))
            .copied()
            .collect();
        let mut got = sub.triplets();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
        // seeds first, in given order, deduplicated
        let mut distinct = Vec::new();
        for s in &seeds {
            if !distinct.contains(s) {
                distinct.push(*s);
            }
        }
        prop_assert_eq!(&sub.nodes()[..distinct.len()], distinct.as_slice());
        prop_assert!(sub.len() <= distinct.len() * (1 + cap));
        prop_assert_eq!(sub.clone(), expand_subgraph(&kg, &seeds, cap, seed ^ 1).unwrap());
    }

    #[test]
    fn holdout_partitions_exactly(n in 0usize..400, rate in 0.01f64..0.99, seed in any::<u64>()) {
        let ts: Vec<Triplet> = (0..n as u64).map(|i| Triplet::new(i, 0, i + 1)).collect();
        let (visible, held) = split_triplets(&ts, rate, seed).unwrap();
        prop_assert_eq!(held.len(), (rate * n as f64).round() as usize);
        prop_assert_eq!(visible.len() + held.len(), n);
        let v: HashSet<Triplet> = visible.iter().copied().collect();
        let h: HashSet<Triplet> = held.iter().copied().collect();
        prop_assert!(v.is_disjoint(&h));
        let all: HashSet<Triplet> = ts.iter().copied().collect();
        prop_assert_eq!(v.union(&h).copied().collect::<HashSet<_>>(), all);
    }
}
