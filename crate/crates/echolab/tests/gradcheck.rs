//! Central finite-difference oracle for every differentiable op.
//!
//! Each case builds a scalar loss from random f64 leaves, takes analytic
//! gradients through the tape, then independently estimates each partial by
//! symmetric differencing of the rebuilt forward pass. Max relative error
//! must stay below 1e-4.

use echolab::rng::rng_from_seed;
use echolab::tensor::{Tape, TensorId};
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId>,
}

fn random_leaves(shapes: &[Vec<usize>], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect()
}

fn forward(case: &Case, values: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = values
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| tape.leaf(v.clone(), s.clone(), true))
        .collect();
    let loss = (case.build)(&mut tape, &ids);
    tape.scalar(loss)
}

fn check(case: &Case) {
    let values = random_leaves(&case.shapes, 0xEC40 + case.name.len() as u64);
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = values
        .iter()
        .zip(&case.shapes)
        .map(|(v, s)| tape.leaf(v.clone(), s.clone(), true))
        .collect();
    let loss = (case.build)(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let mut worst = 0.0f64;
    for (li, leaf) in values.iter().enumerate() {
        for ei in 0..leaf.len() {
            let mut plus = values.to_vec();
            plus[li][ei] += EPS;
            let mut minus = values.to_vec();
            minus[li][ei] -= EPS;
            let fd = (forward(case, &plus) - forward(case, &minus)) / (2.0 * EPS);
            let a = analytic[li][ei];
            let denom = a.abs().max(fd.abs());
            if denom < 1e-10 {
                continue;
            }
            let rel = (a - fd).abs() / denom.max(1e-8);
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel < TOL,
                "{}: leaf {li} elem {ei}: analytic {a} vs fd {fd} (rel {rel:.3e})",
                case.name
            );
        }
    }
    eprintln!("{:<22} max rel err {worst:.3e}", case.name);
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: Box::new(|t, ids| {
                let y = t.matmul(ids[0], ids[1]);
                t.mean_all(y)
            }),
        },
        Case {
            name: "add_sub_mul_scale",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1]);
                let d = t.sub(s, ids[1]);
                let m = t.mul(d, ids[0]);
                let sc = t.scale(m, 1.7);
                t.mean_all(sc)
            }),
        },
        Case {
            name: "add_bias",
            shapes: vec![vec![3, 4], vec![4]],
            build: Box::new(|t, ids| {
                let y = t.add_bias(ids[0], ids[1]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "broadcast_row",
            shapes: vec![vec![4], vec![3, 4]],
            build: Box::new(|t, ids| {
                let rows = t.broadcast_row(ids[0], 3);
                let y = t.mul(rows, ids[1]);
                t.mean_all(y)
            }),
        },
        Case {
            name: "gather_dup_rows",
            shapes: vec![vec![4, 3]],
            build: Box::new(|t, ids| {
                let g = t.gather_rows(ids[0], &[1, 1, 3]);
                let sq = t.mul(g, g);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![3, 3]],
            build: Box::new(|t, ids| {
                let c = t.concat_rows(ids[0], ids[1]);
                let sq = t.mul(c, c);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "add_rows_from_table",
            shapes: vec![vec![4, 3], vec![2, 3]],
            build: Box::new(|t, ids| {
                let y = t.add_rows_from_table(ids[0], ids[1], &[0, 1, 1, 0]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "mul_rows",
            shapes: vec![vec![3, 2]],
            build: Box::new(|t, ids| {
                let y = t.mul_rows(ids[0], &[0.0, 1.0, -0.5]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "gelu",
            shapes: vec![vec![2, 5]],
            build: Box::new(|t, ids| {
                let y = t.gelu(ids[0]);
                t.mean_all(y)
            }),
        },
        Case {
            name: "softmax",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: Box::new(|t, ids| {
                let y = t.softmax(ids[0]);
                let m = t.mul(y, ids[1]);
                t.mean_all(m)
            }),
        },
        Case {
            name: "layer_norm",
            shapes: vec![vec![3, 5], vec![5], vec![5]],
            build: Box::new(|t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "attention",
            shapes: vec![vec![3, 4], vec![5, 4], vec![5, 4]],
            build: Box::new(|t, ids| {
                let y = t.attention(ids[0], ids[1], ids[2], 2, None);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "attention_masked",
            shapes: vec![vec![2, 4], vec![5, 4], vec![5, 4]],
            build: Box::new(|t, ids| {
                let keep = vec![true, false, true, true, false];
                let y = t.attention(ids[0], ids[1], ids[2], 2, Some(&keep));
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }),
        },
        Case {
            name: "l1_mean",
            shapes: vec![vec![2, 3]],
            build: Box::new(|t, ids| {
                // Fixed far-away target keeps eps-perturbations off the kink.
                let c = t.constant(vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0], vec![2, 3]);
                t.l1_mean(ids[0], c)
            }),
        },
        Case {
            name: "mse_mean",
            shapes: vec![vec![2, 3], vec![2, 3]],
            build: Box::new(|t, ids| t.mse_mean(ids[0], ids[1])),
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![1, 5]],
            build: Box::new(|t, ids| t.cross_entropy(ids[0], 2)),
        },
        Case {
            name: "mini_transformer_path",
            shapes: vec![vec![4, 6], vec![6, 6], vec![6, 6], vec![6, 6], vec![6], vec![6]],
            build: Box::new(|t, ids| {
                let x = ids[0];
                let ln = t.layer_norm(x, ids[4], ids[5], 1e-5);
                let q = t.matmul(ln, ids[1]);
                let k = t.matmul(ln, ids[2]);
                let v = t.matmul(ln, ids[3]);
                let a = t.attention(q, k, v, 2, None);
                let res = t.add(x, a);
                let g = t.gelu(res);
                let sq = t.mul(g, g);
                t.mean_all(sq)
            }),
        },
    ]
}

#[test]
fn every_op_matches_central_finite_differences() {
    for case in cases() {
        check(&case);
    }
}
