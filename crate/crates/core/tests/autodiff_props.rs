use daycast_core::autodiff::{finite_diff_check, Bindings, NodeId, Session, Tape};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPS: [&str; 18] = [
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "softplus",
    "log",
    "square",
    "scale",
    "offset",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "dropout",
    "mean",
];

/// Entries with magnitude in [0.1, 1] and random sign, away from the
/// leaky-ReLU kink.
fn signed(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(0.5..2.0))
}

/// Builds `sum(op(a, b) * w)` for one op; returns tape and bindings.
fn single_op_graph(
    op: &str,
    rows: usize,
    cols: usize,
    bcast: u8,
    rng: &mut ChaCha8Rng,
) -> (Tape, Bindings<'static>) {
    let mut t = Tape::new();
    let a = t.parameter("a");
    let b = t.parameter("b");
    let w = t.input("w");
    let b_shape = match bcast {
        0 => (rows, cols),
        1 => (1, cols),
        _ => (1, 1),
    };
    let (y, a_val, b_val, out_shape): (NodeId, _, _, (usize, usize)) = match op {
        "add" => (
            t.add(a, b),
            signed(rng, rows, cols),
            signed(rng, b_shape.0, b_shape.1),
            (rows, cols),
        ),
        "sub" => (
            t.sub(a, b),
            signed(rng, rows, cols),
            signed(rng, b_shape.0, b_shape.1),
            (rows, cols),
        ),
        "mul" => (
            t.mul(a, b),
            signed(rng, rows, cols),
            signed(rng, b_shape.0, b_shape.1),
            (rows, cols),
        ),
        "div" => (
            t.div(a, b),
            signed(rng, rows, cols),
            positive(rng, b_shape.0, b_shape.1),
            (rows, cols),
        ),
        "matmul" => {
            let k = 1 + (rows * 7 + cols) % 32;
            (
                t.matmul(a, b),
                signed(rng, rows, cols),
                signed(rng, cols, k),
                (rows, k),
            )
        }
        "concat_cols" => {
            let y = t.concat_cols(&[a, b]);
            (
                y,
                signed(rng, rows, cols),
                signed(rng, rows, 3),
                (rows, cols + 3),
            )
        }
        "concat_rows" => {
            let y = t.concat_rows(&[a, b]);
            (
                y,
                signed(rng, rows, cols),
                signed(rng, 2, cols),
                (rows + 2, cols),
            )
        }
        "dropout" => {
            let mask = t.input("mask");
            let d = t.dropout(a, mask, 0.3);
            let y = t.mul(d, b);
            let prod = t.mul(y, w);
            let loss = t.sum(prod);
            t.set_loss(loss);
            let m = Array2::from_shape_simple_fn((rows, cols), || {
                if rng.random::<f64>() < 0.3 {
                    0.0
                } else {
                    1.0 / 0.7
                }
            });
            let mut bind = Bindings::new(&t);
            bind.bind(a, signed(rng, rows, cols))
                .bind(b, signed(rng, rows, cols))
                .bind(w, signed(rng, rows, cols))
                .bind(mask, m);
            return (t, bind);
        }
        unary => {
            let a_val = if unary == "log" {
                positive(rng, rows, cols)
            } else {
                signed(rng, rows, cols)
            };
            let u = match unary {
                "sigmoid" => t.sigmoid(a),
                "tanh" => t.tanh(a),
                "leaky_relu" => t.leaky_relu(a, 0.1),
                "softplus" => t.softplus(a),
                "log" => t.log(a),
                "square" => t.square(a),
                "scale" => t.scale(a, -1.7),
                "offset" => t.offset(a, 0.3),
                "slice_cols" => t.slice_cols(a, cols / 3, cols),
                "mean" => t.mean(a),
                other => panic!("unknown op {other}"),
            };
            let out = match unary {
                "slice_cols" => (rows, cols - cols / 3),
                "mean" => (1, 1),
                _ => (rows, cols),
            };
            // keep b in the graph so every parameter gets a gradient
            let y = t.mul(u, b);
            (y, a_val, signed(rng, 1, 1), out)
        }
    };
    let prod = t.mul(y, w);
    let loss = t.sum(prod);
    t.set_loss(loss);
    let mut bind = Bindings::new(&t);
    bind.bind(a, a_val)
        .bind(b, b_val)
        .bind(w, signed(rng, out_shape.0, out_shape.1));
    (t, bind)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_op_matches_finite_differences(op in 0usize..OPS.len(), rows in 1usize..=32, cols in 2usize..=32, bcast in 0u8..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape, bind) = single_op_graph(OPS[op], rows, cols, bcast, &mut rng);
        let rep = finite_diff_check(&tape, &bind, 1e-5).unwrap();
        prop_assert!(rep.components_checked >= rows * cols);
        prop_assert!(rep.max_error < 1e-4, "{} {}x{}: {:?}", OPS[op], rows, cols, rep);
    }

    #[test]
    fn gradient_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x_val, w_val) = (signed(&mut rng, 5, 4), signed(&mut rng, 4, 3));
        let grads = |which: u8| {
            let mut t = Tape::new();
            let x = t.input("x");
            let w = t.parameter("w");
            let h = t.matmul(x, w);
            let th = t.tanh(h);
            let sq = t.square(th);
            let l1 = t.sum(sq);
            let sg = t.sigmoid(h);
            let pr = t.mul(sg, h);
            let l2 = t.mean(pr);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => {
                    let s1 = t.scale(l1, a);
                    let s2 = t.scale(l2, b);
                    t.add(s1, s2)
                }
            };
            t.set_loss(loss);
            let mut bind = Bindings::new(&t);
            bind.bind(x, x_val.clone()).bind(w, w_val.clone());
            let mut s = Session::new(&t, &bind);
            s.forward().unwrap();
            s.backward().unwrap().into_vec().remove(0)
        };
        let (g1, g2, g) = (grads(1), grads(2), grads(0));
        let combo = &g1 * a + &g2 * b;
        for (x, y) in combo.iter().zip(g.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn repeated_sessions_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (tape, bind) = single_op_graph("matmul", 16, 12, 0, &mut rng);
    let run = || {
        let mut s = Session::new(&tape, &bind);
        let l = s.forward().unwrap().unwrap();
        let g = s.backward().unwrap().into_vec();
        (
            l.to_bits(),
            g.iter()
                .flat_map(|m| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
