use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::geometry::BinGrid;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Graph<'a> = &'a dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Plain central differences, kept separate from the library helper.
fn fd(inputs: &[Tensor<f64>], f: Graph) -> Vec<Tensor<f64>> {
    let eval = |xs: &[Tensor<f64>]| {
        let t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&t, &v).unwrap();
        t.scalar(out)
    };
    let mut xs = inputs.to_vec();
    let mut out = Vec::new();
    for k in 0..xs.len() {
        let mut g = vec![0.0; xs[k].len()];
        for (e, ge) in g.iter_mut().enumerate() {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + H;
            let p = eval(&xs);
            xs[k].data_mut()[e] = orig - H;
            let m = eval(&xs);
            xs[k].data_mut()[e] = orig;
            *ge = (p - m) / (2.0 * H);
        }
        out.push(Tensor::new(xs[k].rows(), xs[k].cols(), g).unwrap());
    }
    out
}

fn assert_grads(name: &str, inputs: &[Tensor<f64>], f: Graph) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let numeric = fd(inputs, f);
    for (k, (v, n)) in vars.iter().zip(&numeric).enumerate() {
        let err = relative_error(&grads.wrt(*v), n);
        assert!(err < TOL, "{name}: input {k} relative error {err:e}");
    }
}

/// Weighted sum with fixed pseudo-random weights so every output element matters.
fn project(tape: &Tape<f64>, v: Var) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let w: Vec<f64> = (0..r * c)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
        .collect();
    let w = tape.constant(Tensor::new(r, c, w)?);
    Ok(tape.sum(tape.mul(v, w)?))
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::filled(1, 5, 3.7));
    let y = tape.value(tape.softmax(x));
    for &v in y.data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_survives_large_logits() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::row_vector(vec![1000.0, 1000.0, -1000.0]));
    let y = tape.value(tape.softmax(x));
    assert!(y.all_finite());
    assert!((y.data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn segment_mean_hand_example() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::column_vector(vec![1.0, 2.0, 3.0, 4.0]));
    let m = tape.segment_mean(x, Rc::from(vec![0, 0, 1, 1]), 2).unwrap();
    assert_eq!(tape.value(m).data(), &[1.5, 3.5]);
}

#[test]
fn segment_mean_empty_segment_is_zero() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::column_vector(vec![1.0, 2.0]));
    let m = tape.segment_mean(x, Rc::from(vec![0, 2]), 3).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 0.0, 2.0]);
    assert!(tape.segment_mean(x, Rc::from(vec![0, 3]), 3).is_err());
}

#[test]
fn matmul_identity_and_shape_error() {
    let tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, 3, 4);
    let i = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    assert_eq!(tape.value(tape.matmul(i, av).unwrap()), a);
    let err = tape.matmul(av, av).unwrap_err().to_string();
    assert!(err.contains("(3, 4)"), "{err}");
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::filled(3, 2, 0.3));
    let g = tape.backward(tape.sum(x)).unwrap();
    assert_eq!(g.wrt(x), Tensor::ones(3, 2));
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
    let g = tape.backward(tape.sum(tape.mul(x, x).unwrap())).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
    let y = tape.param(Tensor::row_vector(vec![5.0]));
    let g = tape.backward(tape.sum(x)).unwrap();
    assert_eq!(g.wrt(y).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn relu_subgradient_zero_at_kink() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::row_vector(vec![0.0, 1.0, -1.0]));
    let g = tape.backward(tape.sum(tape.relu(x))).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn cosine_zero_vector_is_orthogonal() {
    let tape = Tape::<f64>::new();
    let a = tape.param(Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap());
    let b = tape.param(Tensor::from_rows(&[[1.0, 2.0, 3.0], [-2.0, 0.0, 0.0]]).unwrap());
    let c = tape.cosine_similarity(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0, -1.0]);
    let g = tape.backward(tape.sum(c)).unwrap();
    assert!(g.wrt(a).row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn clip_below_threshold_unchanged() {
    let mut g = vec![Tensor::row_vector(vec![0.3_f64, 0.4])];
    let n = clip_global_norm(&mut g, 1.0);
    assert!((n - 0.5).abs() < 1e-15);
    assert_eq!(g[0].data(), &[0.3, 0.4]);
}

#[test]
fn clip_scales_to_max_norm() {
    let mut g = vec![
        Tensor::row_vector(vec![1.2_f64]),
        Tensor::row_vector(vec![0.0, 1.6]),
    ];
    let n = clip_global_norm(&mut g, 1.0);
    assert!((n - 2.0).abs() < 1e-15);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((g[1].data()[1] - 0.8).abs() < 1e-15);
    let after: f64 = g.iter().map(|t| t.squared_norm()).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);
}

#[test]
fn clip_zero_grads_unchanged() {
    let mut g = vec![Tensor::<f64>::zeros(2, 2)];
    assert_eq!(clip_global_norm(&mut g, 1.0), 0.0);
    assert_eq!(g[0], Tensor::zeros(2, 2));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = random_tensor(&mut rng, 4, 3);
    let b = random_tensor(&mut rng, 4, 3);
    let w = random_tensor(&mut rng, 3, 5);
    let row = random_tensor(&mut rng, 1, 3);
    let pos = a.map(|v| v + 2.0);

    assert_grads("matmul", &[a.clone(), w.clone()], &|t, v| {
        project(t, t.matmul(v[0], v[1])?)
    });
    assert_grads("add", &[a.clone(), b.clone()], &|t, v| {
        project(t, t.add(v[0], v[1])?)
    });
    assert_grads("sub", &[a.clone(), b.clone()], &|t, v| {
        project(t, t.sub(v[0], v[1])?)
    });
    assert_grads("mul", &[a.clone(), b.clone()], &|t, v| {
        project(t, t.mul(v[0], v[1])?)
    });
    assert_grads("add_row", &[a.clone(), row.clone()], &|t, v| {
        project(t, t.add_row(v[0], v[1])?)
    });
    assert_grads("scalar_mul", std::slice::from_ref(&a), &|t, v| {
        project(t, t.scalar_mul(v[0], -2.5))
    });
    assert_grads("add_scalar", std::slice::from_ref(&a), &|t, v| {
        project(t, t.add_scalar(v[0], 0.7))
    });
    assert_grads("silu", std::slice::from_ref(&a), &|t, v| {
        project(t, t.silu(v[0]))
    });
    assert_grads("exp", std::slice::from_ref(&a), &|t, v| {
        project(t, t.exp(v[0]))
    });
    assert_grads("log", std::slice::from_ref(&pos), &|t, v| {
        project(t, t.log(v[0]))
    });
    assert_grads("softmax", std::slice::from_ref(&a), &|t, v| {
        project(t, t.softmax(v[0]))
    });
    assert_grads("clamp", std::slice::from_ref(&a), &|t, v| {
        project(t, t.clamp(v[0], -1.4, 1.4))
    });
    assert_grads("sum", std::slice::from_ref(&a), &|t, v| {
        Ok(t.sum(t.square(v[0])))
    });
    assert_grads("mean", std::slice::from_ref(&a), &|t, v| {
        Ok(t.mean(t.exp(v[0])))
    });
    assert_grads("concat", &[a.clone(), b.clone()], &|t, v| {
        project(t, t.concat(&[v[0], v[1], v[0]])?)
    });
    assert_grads("slice_cols", std::slice::from_ref(&a), &|t, v| {
        project(t, t.slice_cols(v[0], 1, 3)?)
    });
    let idx: Rc<[usize]> = Rc::from(vec![3, 0, 0, 2, 1, 3]);
    assert_grads("index_gather", std::slice::from_ref(&a), &|t, v| {
        project(t, t.index_gather(v[0], idx.clone())?)
    });
    let seg: Rc<[usize]> = Rc::from(vec![1, 0, 1, 1]);
    assert_grads("segment_sum", std::slice::from_ref(&a), &|t, v| {
        project(t, t.segment_sum(v[0], seg.clone(), 3)?)
    });
    assert_grads("segment_mean", std::slice::from_ref(&a), &|t, v| {
        project(t, t.segment_mean(v[0], seg.clone(), 3)?)
    });
    assert_grads("l2_norm", std::slice::from_ref(&a), &|t, v| {
        project(t, t.l2_norm(v[0]))
    });
    assert_grads("cosine", &[a.clone(), b.clone()], &|t, v| {
        project(t, t.cosine_similarity(v[0], v[1])?)
    });
    let boxes = Tensor::filled(4, 3, 2.0);
    assert_grads("min_image", std::slice::from_ref(&a), &|t, v| {
        project(t, t.min_image(v[0], &boxes)?)
    });
}

#[test]
fn soft_histogram_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d: Vec<f64> = (0..12).map(|_| rng.random_range(0.3..2.9)).collect();
    let d = Tensor::column_vector(d);
    let grids: Rc<[BinGrid<f64>]> = Rc::from(vec![
        BinGrid {
            r_max: 3.0,
            bins: 16,
            sigma: 0.1875,
        },
        BinGrid {
            r_max: 3.2,
            bins: 16,
            sigma: 0.3,
        },
    ]);
    let seg: Rc<[usize]> = Rc::from((0..12).map(|i| i % 2).collect::<Vec<_>>());
    assert_grads("soft_histogram", &[d], &|t, v| {
        let h = t.soft_histogram(v[0], seg.clone(), grids.clone())?;
        project(t, t.square(h))
    });
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, 5, 4);
    let params = vec![
        random_tensor(&mut rng, 4, 6),
        random_tensor(&mut rng, 1, 6),
        random_tensor(&mut rng, 6, 6),
        random_tensor(&mut rng, 1, 6),
        random_tensor(&mut rng, 6, 2),
        random_tensor(&mut rng, 1, 2),
    ];
    let xc = x.clone();
    let f = move |t: &Tape<f64>, v: &[Var]| -> Result<Var> {
        let input = t.constant(xc.clone());
        let h1 = t.silu(t.add_row(t.matmul(input, v[0])?, v[1])?);
        let h2 = t.relu(t.add_row(t.matmul(h1, v[2])?, v[3])?);
        let out = t.add_row(t.matmul(h2, v[4])?, v[5])?;
        Ok(t.mean(t.square(out)))
    };
    assert_grads("mlp", &params, &f);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::<f64>::new();
        let a = tape.param(random_tensor(&mut rng, 6, 4));
        let w = tape.param(random_tensor(&mut rng, 4, 4));
        let h = tape.silu(tape.matmul(a, w).unwrap());
        let s = tape
            .segment_mean(h, Rc::from(vec![0, 1, 0, 1, 2, 2]), 3)
            .unwrap();
        let loss = tape.sum(tape.softmax(s));
        let g = tape.backward(loss).unwrap();
        (
            tape.scalar(loss).to_bits(),
            g.wrt(w)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_forward_pass() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::row_vector(vec![1.0_f32, -2.0, 0.5]));
    let loss = tape.sum(tape.silu(x));
    assert!(tape.scalar(loss).is_finite());
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).len(), 3);
}

proptest! {
    #[test]
    fn segment_mean_grad_distributes_evenly(ids in proptest::collection::vec(0usize..4, 1..12)) {
        let tape = Tape::<f64>::new();
        let n = ids.len();
        let x = tape.param(Tensor::column_vector((0..n).map(|i| i as f64).collect()));
        let m = tape.segment_mean(x, Rc::from(ids.clone()), 4).unwrap();
        let g = tape.backward(tape.sum(m)).unwrap().wrt(x);
        let mut counts = [0usize; 4];
        for &i in &ids { counts[i] += 1; }
        for (r, &i) in ids.iter().enumerate() {
            prop_assert!((g.data()[r] - 1.0 / counts[i] as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_on_simplex(v in proptest::collection::vec(-50.0f64..50.0, 2..9)) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(v));
        let y = tape.value(tape.softmax(x));
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
    }
}
