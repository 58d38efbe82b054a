mod common;

use common::{build_case, layer_oracle, max_diff, random_case, rows, GnnCase};
use kvlp_core::gnn::{gnn_encode, gnn_layer_with_attention, relation_embedding, GnnLayerParams, RelationTable};
use kvlp_core::gradcheck::finite_difference_check;
use kvlp_core::kg::SubgraphEdge;
use kvlp_core::{Direction, Error, Graph, Tensor};
use proptest::prelude::*;

fn run(case: &GnnCase, nodes: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = case.store.bind(&mut g);
    let x = g.constant(nodes.clone());
    let y = gnn_encode(&mut g, &b, &case.sub, &case.table, x, &case.layers).unwrap();
    g.value(y).clone()
}

fn attention(case: &GnnCase) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::new();
    let b = case.store.bind(&mut g);
    let x = g.constant(case.nodes.clone());
    let (_, alpha, msgs) = gnn_layer_with_attention(&mut g, &b, &case.sub, &case.table, x, &case.layers[0]).unwrap();
    (g.value(alpha).data().to_vec(), msgs.iter().map(|m| m.dst).collect())
}

fn oracle(case: &GnnCase) -> Vec<Vec<f64>> {
    let mut x = rows(&case.nodes);
    for p in &case.layers {
        x = layer_oracle(&case.store, &case.table, p, &case.sub, &x).0;
    }
    x
}

fn zero_update(case: &mut GnnCase, p: &GnnLayerParams) {
    for id in [p.node, p.node_bias] {
        case.store.get_mut(id).data_mut().fill(0.0);
    }
}

fn path() -> Vec<SubgraphEdge> {
    vec![
        SubgraphEdge {
            head: 0,
            relation: 0,
            tail: 1,
        },
        SubgraphEdge {
            head: 1,
            relation: 1,
            tail: 2,
        },
    ]
}

#[test]
fn three_node_path_matches_the_scalar_oracle() {
    for depth in [1, 2] {
        let case = build_case(3, 2, path(), 4, depth, 5);
        let got = run(&case, &case.nodes);
        assert!(max_diff(&oracle(&case), &got) < 1e-10, "depth {depth}");
    }
}

#[test]
fn isolated_node_attends_only_to_itself() {
    let case = build_case(1, 1, vec![], 4, 1, 6);
    let (alpha, _) = attention(&case);
    assert_eq!(alpha, vec![1.0]);

    // f_n(f_m([e, r_self])) + e written out by hand
    let p = &case.layers[0];
    let s = &case.store;
    let mut joined = case.nodes.row_slice(0).to_vec();
    joined.extend_from_slice(s.get(case.table.param).row_slice(case.table.self_row()));
    let fm: Vec<f64> = (0..4)
        .map(|c| s.get(p.message_bias).get(0, c) + (0..8).map(|r| joined[r] * s.get(p.message).get(r, c)).sum::<f64>())
        .collect();
    let want: Vec<f64> = (0..4)
        .map(|c| {
            s.get(p.node_bias).get(0, c)
                + (0..4).map(|r| fm[r] * s.get(p.node).get(r, c)).sum::<f64>()
                + case.nodes.get(0, c)
        })
        .collect();
    assert!(max_diff(&[want], &run(&case, &case.nodes)) < 1e-12);
}

#[test]
fn zeroed_update_is_the_identity() {
    let mut case = random_case(7, 3, 12, 6, 2, 7);
    for p in case.layers.clone() {
        zero_update(&mut case, &p);
    }
    assert_eq!(run(&case, &case.nodes), case.nodes);
}

#[test]
fn one_layer_only_sees_direct_neighbours() {
    // path 0 - 1 - 2: node 2 is two hops from node 0
    let case = build_case(3, 2, path(), 4, 1, 8);
    let mut moved = case.nodes.clone();
    moved.set(2, 1, moved.get(2, 1) + 1.0);
    let a = run(&case, &case.nodes);
    let b = run(&case, &moved);
    assert_eq!(a.row_slice(0), b.row_slice(0));
    assert_ne!(a.row_slice(1), b.row_slice(1));

    let two = build_case(3, 2, path(), 4, 2, 8);
    assert_ne!(run(&two, &two.nodes).row_slice(0), run(&two, &moved).row_slice(0));
}

#[test]
fn relation_table_layout() {
    let case = build_case(2, 3, vec![], 4, 1, 9);
    let again = build_case(2, 3, vec![], 4, 1, 9);
    assert_eq!(case.store.get(case.table.param), again.store.get(again.table.param));
    assert_eq!(case.store.get(case.table.param).shape(), &[7, 4]);
    assert_eq!(case.table.self_row(), 6);
    assert_eq!(case.table.row(2, Direction::Incoming).unwrap(), 5);
    assert!(matches!(case.table.row(3, Direction::Outgoing), Err(Error::UnknownRelation(3))));
    assert_ne!(
        relation_embedding(&case.store, &case.table, 0, Direction::Outgoing).unwrap(),
        relation_embedding(&case.store, &case.table, 1, Direction::Outgoing).unwrap()
    );
}

#[test]
fn directions_receive_separate_gradients() {
    // a single edge 0 -> 1: receiver 1 uses the outgoing row, receiver 0 the incoming row
    let edge = vec![SubgraphEdge {
        head: 0,
        relation: 1,
        tail: 1,
    }];
    let case = build_case(2, 2, edge, 4, 1, 10);
    let mut g = Graph::new();
    let b = case.store.bind(&mut g);
    let x = g.constant(case.nodes.clone());
    let y = gnn_encode(&mut g, &b, &case.sub, &case.table, x, &case.layers).unwrap();
    let only_one = g.slice_rows(y, 1, 2).unwrap();
    let s = g.sum(only_one).unwrap();
    let grads = g.backward(s).unwrap();
    let gt = grads.wrt(b[case.table.param]);
    let nonzero = |r: usize| gt.row_slice(r).iter().any(|v| *v != 0.0);
    assert!(nonzero(case.table.row(1, Direction::Outgoing).unwrap()));
    assert!(!nonzero(case.table.row(1, Direction::Incoming).unwrap()));
    assert!(nonzero(case.table.self_row()));
    assert!(!nonzero(case.table.row(0, Direction::Outgoing).unwrap()));
}

#[test]
fn malformed_inputs_are_rejected() {
    let case = random_case(4, 2, 5, 4, 1, 11);
    let mut g = Graph::new();
    let b = case.store.bind(&mut g);
    let x = g.constant(case.nodes.clone());
    assert!(gnn_encode(&mut g, &b, &case.sub, &case.table, x, &[]).is_err());
    let short = g.constant(Tensor::zeros(&[3, 4]));
    assert!(gnn_encode(&mut g, &b, &case.sub, &case.table, short, &case.layers).is_err());
}

#[test]
fn two_layers_pass_finite_differences() {
    let case = random_case(5, 2, 7, 4, 2, 12);
    let nodes = case.nodes.clone();
    let report = finite_difference_check(
        |g, b| {
            let x = g.constant(nodes.clone());
            let y = gnn_encode(g, b, &case.sub, &case.table, x, &case.layers)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &case.store,
        1e-5,
        150,
        3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
}

#[test]
fn relation_table_needs_a_known_relation() {
    let case = build_case(1, 1, vec![], 4, 1, 13);
    let t: &RelationTable = &case.table;
    assert_eq!(t.relation_count(), 1);
    assert!(relation_embedding(&case.store, t, 7, Direction::Incoming).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_graphs_match_the_scalar_oracle(
        n in 1usize..10,
        edges in 0usize..25,
        depth in 1usize..3,
        seed in any::<u64>(),
    ) {
        let case = random_case(n, 3, edges, 4, depth, seed);
        prop_assert!(max_diff(&oracle(&case), &run(&case, &case.nodes)) < 1e-10);
    }

    #[test]
    fn attention_sums_to_one_per_receiver(n in 1usize..10, edges in 0usize..25, seed in any::<u64>()) {
        let case = random_case(n, 3, edges, 4, 1, seed);
        let (alpha, dst) = attention(&case);
        let mut sums = vec![0.0; n];
        for (a, d) in alpha.iter().zip(&dst) {
            sums[*d] += a;
        }
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relabelling_nodes_permutes_the_output(
        n in 1usize..10,
        edges in 0usize..25,
        seed in any::<u64>(),
        keys in prop::collection::vec(any::<u32>(), 10),
    ) {
        let case = random_case(n, 3, edges, 4, 2, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (keys[i], i));
        let moved_sub = case.sub.permuted(&perm).unwrap();
        let mut moved = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            for c in 0..4 {
                moved.set(perm[i], c, case.nodes.get(i, c));
            }
        }
        let a = run(&case, &case.nodes);
        let other = GnnCase { sub: moved_sub, nodes: moved.clone(), ..case };
        let b = run(&other, &moved);
        for i in 0..n {
            prop_assert_eq!(a.row_slice(i), b.row_slice(perm[i]));
        }
    }
}
