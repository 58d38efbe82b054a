use kvlp_core::gradcheck::finite_difference_check;
use kvlp_core::rng::rng_from;
use kvlp_core::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces `out` to a scalar against a fixed random weighting so every
/// output element gets a distinct upstream gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(out).dims2()?;
    let w = g.constant(random(r, c, -1.0, 1.0, &mut rng_from(seed)));
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Finite-difference check of `op` over every input element across several
/// seeded draws.
fn check_op<F>(name: &str, shapes: &[(usize, usize)], range: (f64, f64), op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    for seed in 0..5u64 {
        let mut rng = rng_from(1000 + seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("x{i}"), random(r, c, range.0, range.1, &mut rng)).unwrap())
            .collect();
        let total = store.scalar_count();
        let report = finite_difference_check(
            |g, b| {
                let xs: Vec<Var> = ids.iter().map(|&id| b[id]).collect();
                let y = op(g, &xs)?;
                project(g, y, seed)
            },
            &store,
            EPS,
            total,
            seed,
        )
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: {:?}",
            report.worst()
        );
    }
}

#[test]
fn linear_algebra_primitives() {
    check_op("matmul", &[(3, 4), (4, 2)], (-1.0, 1.0), |g, x| g.matmul(x[0], x[1]));
    check_op("matmul_nt", &[(3, 4), (5, 4)], (-1.0, 1.0), |g, x| g.matmul_nt(x[0], x[1]));
    check_op("transpose", &[(3, 4)], (-1.0, 1.0), |g, x| g.transpose(x[0]));
}

#[test]
fn elementwise_primitives() {
    check_op("add", &[(3, 4), (3, 4)], (-1.0, 1.0), |g, x| g.add(x[0], x[1]));
    check_op("sub", &[(3, 4), (3, 4)], (-1.0, 1.0), |g, x| g.sub(x[0], x[1]));
    check_op("mul", &[(3, 4), (3, 4)], (-1.0, 1.0), |g, x| g.mul(x[0], x[1]));
    check_op("add_row", &[(3, 4), (1, 4)], (-1.0, 1.0), |g, x| g.add_row(x[0], x[1]));
    check_op("mul_row", &[(3, 4), (1, 4)], (-1.0, 1.0), |g, x| g.mul_row(x[0], x[1]));
    check_op("mul_col", &[(3, 4), (3, 1)], (-1.0, 1.0), |g, x| g.mul_col(x[0], x[1]));
    check_op("scale", &[(3, 4)], (-1.0, 1.0), |g, x| g.scale(x[0], -2.5));
    check_op("add_scalar", &[(3, 4)], (-1.0, 1.0), |g, x| g.add_scalar(x[0], 0.7));
    check_op("div_scalar", &[(3, 4), (1, 1)], (0.5, 1.5), |g, x| g.div_scalar(x[0], x[1]));
    check_op("clamp interior", &[(3, 4)], (-0.5, 0.5), |g, x| g.clamp(x[0], -1.0, 1.0));
    check_op("exp", &[(3, 4)], (-2.0, 2.0), |g, x| g.exp(x[0]));
    check_op("log", &[(3, 4)], (0.2, 3.0), |g, x| g.log(x[0]));
    check_op("sigmoid", &[(3, 4)], (-4.0, 4.0), |g, x| g.sigmoid(x[0]));
    check_op("log_sigmoid", &[(3, 4)], (-4.0, 4.0), |g, x| g.log_sigmoid(x[0]));
    check_op("gelu", &[(3, 4)], (-3.0, 3.0), |g, x| g.gelu(x[0]));
}

#[test]
fn reduction_primitives() {
    check_op("sum", &[(3, 4)], (-1.0, 1.0), |g, x| g.sum(x[0]));
    check_op("mean", &[(3, 4)], (-1.0, 1.0), |g, x| g.mean(x[0]));
    check_op("sum_cols", &[(3, 4)], (-1.0, 1.0), |g, x| g.sum_cols(x[0]));
    check_op("mean_rows", &[(3, 4)], (-1.0, 1.0), |g, x| g.mean_rows(x[0]));
}

#[test]
fn normalisation_primitives() {
    check_op("softmax_rows", &[(3, 5)], (-2.0, 2.0), |g, x| g.softmax_rows(x[0]));
    check_op("softmax_rows_masked", &[(3, 5)], (-2.0, 2.0), |g, x| {
        g.softmax_rows_masked(x[0], Some(&[true, false, true, true, false]))
    });
    check_op("layer_norm_rows", &[(3, 6)], (-2.0, 2.0), |g, x| g.layer_norm_rows(x[0], 1e-5));
    check_op("l2_normalize_rows", &[(3, 4)], (-2.0, 2.0), |g, x| g.l2_normalize_rows(x[0]));
    check_op("segment_softmax", &[(7, 1)], (-2.0, 2.0), |g, x| {
        g.segment_softmax(x[0], &[0, 1, 0, 2, 1, 0, 2], 3)
    });
}

#[test]
fn indexing_primitives() {
    check_op("gather_rows", &[(4, 3)], (-1.0, 1.0), |g, x| g.gather_rows(x[0], &[2, 0, 2, 3]));
    check_op("gather_elems", &[(4, 3)], (-1.0, 1.0), |g, x| {
        g.gather_elems(x[0], &[(0, 1), (3, 2), (0, 1)])
    });
    check_op("concat_rows", &[(2, 3), (1, 3), (3, 3)], (-1.0, 1.0), |g, x| {
        g.concat_rows(&[x[0], x[1], x[2]])
    });
    check_op("concat_cols", &[(3, 2), (3, 4)], (-1.0, 1.0), |g, x| g.concat_cols(x[0], x[1]));
    check_op("slice_rows", &[(5, 3)], (-1.0, 1.0), |g, x| g.slice_rows(x[0], 1, 4));
    check_op("replace_rows", &[(5, 3), (1, 3)], (-1.0, 1.0), |g, x| g.replace_rows(x[0], x[1], &[1, 3]));
    check_op("scatter_rows", &[(5, 3), (2, 3)], (-1.0, 1.0), |g, x| g.scatter_rows(x[0], x[1], &[4, 1]));
    check_op("segment_sum", &[(6, 2)], (-1.0, 1.0), |g, x| g.segment_sum(x[0], &[1, 0, 1, 2, 0, 1], 3));
}

#[test]
fn loss_primitives() {
    let target = random(3, 4, -1.0, 1.0, &mut rng_from(9));
    check_op("mse", &[(3, 4)], (-1.0, 1.0), move |g, x| g.mse(x[0], &target));
    check_op("cross_entropy", &[(3, 5)], (-2.0, 2.0), |g, x| g.cross_entropy(x[0], &[4, 0, 2]));
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let logits = random(4, 6, -3.0, 3.0, &mut rng_from(3));
    let targets = [5, 0, 2, 2];
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += z.ln() - row[t];
    }
    expected /= targets.len() as f64;
    let mut g = Graph::new();
    let x = g.constant(logits);
    let l = g.cross_entropy(x, &targets).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-10);
}

#[test]
fn mse_matches_scalar_oracle() {
    let pred = random(3, 5, -2.0, 2.0, &mut rng_from(4));
    let target = random(3, 5, -2.0, 2.0, &mut rng_from(5));
    let mut expected = 0.0;
    for (a, b) in pred.data().iter().zip(target.data()) {
        expected += (a - b) * (a - b);
    }
    expected /= 15.0;
    let mut g = Graph::new();
    let x = g.constant(pred);
    let l = g.mse(x, &target).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn shared_input_accumulates_like_a_product_of_copies() {
    let x0 = random(2, 3, -1.0, 1.0, &mut rng_from(11));
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let gx = g.backward(s).unwrap().wrt(x);

    let mut h = Graph::new();
    let a = h.param(x0.clone());
    let b = h.param(x0.clone());
    let p = h.mul(a, b).unwrap();
    let s = h.sum(p).unwrap();
    let grads = h.backward(s).unwrap();
    let (ga, gb) = (grads.wrt(a), grads.wrt(b));
    for i in 0..x0.len() {
        assert_eq!(gx.data()[i], ga.data()[i] + gb.data()[i]);
        assert_eq!(ga.data()[i], x0.data()[i]);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(4, 6, -1.0, 1.0, &mut rng_from(2)));
        let w = g.param(random(6, 6, -1.0, 1.0, &mut rng_from(3)));
        let y = g.matmul(x, w).unwrap();
        let y = g.layer_norm_rows(y, 1e-5).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let s = project(&mut g, y, 7).unwrap();
        let gw = g.backward(s).unwrap().wrt(w);
        (g.value(y).clone(), gw)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.1f64..50.0,
        seed in any::<u64>(),
    ) {
        let x = random(rows, cols, -scale, scale, &mut rng_from(seed));
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let t = g.value(s);
        for r in 0..rows {
            let row = t.row_slice(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
