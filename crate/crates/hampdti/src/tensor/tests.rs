use super::gradcheck::grad_check;
use super::*;
use crate::sparse::SparseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            // Box-Muller keeps us off rand_distr
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn random_sparse(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut trip = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if rng.gen::<f64>() < density {
                trip.push((i, j, rng.gen::<f64>() + 0.1));
            }
        }
    }
    SparseMatrix::from_triplets(rows, cols, &trip).unwrap()
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]);
    let y = tape.relu(&x).unwrap();
    assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn softmax_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = Tensor::from_vec(4, 1, vec![1.3; 4]);
    let y = tape.softmax_vec(&x).unwrap();
    for v in y.to_vec() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_positive_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x = Tensor::from_vec(6, 1, randn(6, 1, &mut rng).iter().map(|v| v * 20.0).collect());
        let mut tape = Tape::new();
        let y = tape.softmax_vec(&x).unwrap();
        let v = y.to_vec();
        assert!(v.iter().all(|&p| p > 0.0));
        let s: f64 = v.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn row_max_pool_picks_column_maxima() {
    let mut tape = Tape::new();
    let x = Tensor::from_vec(2, 2, vec![1.0, 5.0, 3.0, 2.0]);
    let y = tape.row_max_pool(&x).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 5.0]);
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::new();
    let x = Tensor::param(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let loss = tape.sum(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_squared_norm_gives_two_x() {
    let mut tape = Tape::new();
    let x = Tensor::param(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&sq).unwrap();
    tape.backward(&loss).unwrap();
    let g = x.grad().unwrap();
    for (gv, xv) in g.iter().zip(x.to_vec()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = Tensor::param(1, 2, vec![1.0, 2.0]);
    let y = tape.relu(&x).unwrap();
    assert!(matches!(tape.backward(&y), Err(TensorError::NotScalar(_))));
}

#[test]
fn backward_rejects_foreign_loss() {
    let mut tape = Tape::new();
    let x = Tensor::param(1, 1, vec![1.0]);
    let _ = tape.relu(&x).unwrap();
    let foreign = Tensor::scalar_value(3.0);
    assert!(matches!(
        tape.backward(&foreign),
        Err(TensorError::LossNotOnTape)
    ));
}

#[test]
fn nonfinite_output_is_reported() {
    let mut tape = Tape::new();
    let a = Tensor::from_vec(1, 1, vec![1e308]);
    let b = Tensor::from_vec(1, 1, vec![1e308]);
    match tape.add(&a, &b) {
        Err(TensorError::NonFinite(op)) => assert_eq!(op, "add"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn loss_entries_empty_mask_is_error() {
    let mut tape = Tape::new();
    let p = Tensor::from_vec(2, 2, vec![0.0; 4]);
    let entries = Rc::new(Vec::new());
    assert!(matches!(
        tape.masked_weighted_sq_loss(&p, &entries, 0.4),
        Err(TensorError::EmptyMask)
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = Tensor::from_vec(5, 4, randn(5, 4, &mut rng));
    let w = Tensor::from_vec(4, 3, randn(4, 3, &mut rng));
    let run = || {
        let mut tape = Tape::new();
        let h = tape.matmul(&x, &w).unwrap();
        let r = tape.relu(&h).unwrap();
        r.to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn loss_identity_at_gamma_half() {
    // for binary Y and gamma = 1/2 the loss is half the masked squared error
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let m = 4;
        let n = 5;
        let pred_data = randn(m, n, &mut rng);
        let pred = Tensor::from_vec(m, n, pred_data.clone());
        let mut entries = Vec::new();
        for idx in 0..m * n {
            if rng.gen::<f64>() < 0.5 {
                entries.push((idx, if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 }));
            }
        }
        if entries.is_empty() {
            entries.push((0, 1.0));
        }
        let entries = Rc::new(entries);
        let mut tape = Tape::new();
        let loss = tape
            .masked_weighted_sq_loss(&pred, &entries, 0.5)
            .unwrap()
            .scalar()
            .unwrap();
        let direct: f64 = entries
            .iter()
            .map(|&(idx, y)| {
                let d = y - pred_data[idx];
                d * d
            })
            .sum::<f64>()
            * 0.5;
        assert!((loss - direct).abs() < 1e-12);
    }
}

/// Finite-difference check for a single-op graph built by `build`.
fn check_op<F>(name: &str, params: Vec<Tensor>, build: F)
where
    F: FnMut(&mut Tape) -> Result<Tensor, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let report = grad_check(build, &params, 1e-6, 64, &mut rng).unwrap();
    assert!(
        report.max_rel_error < 1e-6,
        "{name}: rel error {} at param {} coord {}",
        report.max_rel_error,
        report.worst_param,
        report.worst_coord
    );
}

#[test]
fn fd_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = Tensor::param(3, 4, randn(3, 4, &mut rng));
    let b = Tensor::param(4, 2, randn(4, 2, &mut rng));
    let (ac, bc) = (a.clone(), b.clone());
    check_op("matmul", vec![a, b], move |t| {
        let y = t.matmul(&ac, &bc)?;
        let s = t.mul(&y, &y)?;
        t.sum(&s)
    });
}

#[test]
fn fd_matmul_nt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::param(3, 4, randn(3, 4, &mut rng));
    let b = Tensor::param(5, 4, randn(5, 4, &mut rng));
    let (ac, bc) = (a.clone(), b.clone());
    check_op("matmul_nt", vec![a, b], move |t| {
        let y = t.matmul_nt(&ac, &bc)?;
        let s = t.mul(&y, &y)?;
        t.sum(&s)
    });
}

#[test]
fn fd_add_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Tensor::param(3, 3, randn(3, 3, &mut rng));
    let b = Tensor::param(3, 3, randn(3, 3, &mut rng));
    let bias = Tensor::param(1, 3, randn(1, 3, &mut rng));
    let (ac, bc, bic) = (a.clone(), b.clone(), bias.clone());
    check_op("add/bias", vec![a, b, bias], move |t| {
        let s = t.add(&ac, &bc)?;
        let sb = t.add_row_broadcast(&s, &bic)?;
        let sq = t.mul(&sb, &sb)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // keep values away from the relu kink
    let data: Vec<f64> = randn(3, 4, &mut rng)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
        .collect();
    let x = Tensor::param(3, 4, data);
    let xc = x.clone();
    check_op("relu+sigmoid", vec![x], move |t| {
        let r = t.relu(&xc)?;
        let s = t.sigmoid(&r)?;
        let sq = t.mul(&s, &s)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::param(5, 1, randn(5, 1, &mut rng));
    let w = Tensor::from_vec(5, 1, randn(5, 1, &mut rng));
    let xc = x.clone();
    check_op("softmax_vec", vec![x], move |t| {
        let s = t.softmax_vec(&xc)?;
        let weighted = t.mul(&s, &w)?;
        t.sum(&weighted)
    });
}

#[test]
fn fd_row_max_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::param(4, 3, randn(4, 3, &mut rng));
    let xc = x.clone();
    check_op("row_max_pool", vec![x], move |t| {
        let p = t.row_max_pool(&xc)?;
        let sq = t.mul(&p, &p)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_spmm_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = Rc::new(random_sparse(5, 5, 0.4, &mut rng));
    let x = Tensor::param(5, 3, randn(5, 3, &mut rng));
    let xc = x.clone();
    check_op("spmm_dense", vec![x], move |t| {
        let y = t.spmm_dense(&s, &xc)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_weighted_row_block_and_right_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rels = Rc::new(vec![
        random_sparse(8, 8, 0.3, &mut rng),
        random_sparse(8, 8, 0.3, &mut rng),
        random_sparse(8, 8, 0.3, &mut rng),
    ]);
    let a1 = Tensor::param(3, 1, randn(3, 1, &mut rng));
    let a2 = Tensor::param(3, 1, randn(3, 1, &mut rng));
    let (a1c, a2c) = (a1.clone(), a2.clone());
    let rc = Rc::clone(&rels);
    check_op("weighted compose", vec![a1, a2], move |t| {
        let w1 = t.softmax_vec(&a1c)?;
        let w2 = t.softmax_vec(&a2c)?;
        let block = t.weighted_row_block(&w1, &rc, 0..3)?;
        let prod = t.weighted_right_mul(&block, &w2, &rc)?;
        let sq = t.mul(&prod, &prod)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_slices_and_bipartite() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = Tensor::param(4, 6, randn(4, 6, &mut rng).iter().map(|v| v * v).collect());
    let xc = x.clone();
    check_op("slices/bipartite", vec![x], move |t| {
        let cols = t.slice_cols(&xc, 2..5)?;
        let rows = t.slice_rows(&cols, 1..4)?;
        let bip = t.bipartite_embed(&rows)?;
        let sq = t.mul(&bip, &bip)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_sym_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    // nonnegative entries so degrees stay in a well-conditioned range
    let data: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() + 0.2).collect();
    let p = Tensor::param(5, 5, data);
    let pc = p.clone();
    let w = Tensor::from_vec(5, 5, randn(5, 5, &mut rng));
    check_op("sym_normalize", vec![p], move |t| {
        let n = t.sym_normalize(&pc)?;
        let weighted = t.mul(&n, &w)?;
        t.sum(&weighted)
    });
}

#[test]
fn fd_fuse_and_vstack() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let logits = Tensor::param(3, 1, randn(3, 1, &mut rng));
    let e1 = Tensor::param(2, 3, randn(2, 3, &mut rng));
    let e2 = Tensor::param(2, 3, randn(2, 3, &mut rng));
    let e3 = Tensor::param(2, 3, randn(2, 3, &mut rng));
    let (lc, e1c, e2c, e3c) = (logits.clone(), e1.clone(), e2.clone(), e3.clone());
    check_op("fuse/vstack", vec![logits, e1, e2, e3], move |t| {
        let w = t.softmax_vec(&lc)?;
        let z = t.fuse(&w, &[e1c.clone(), e2c.clone(), e3c.clone()])?;
        let stacked = t.vstack(&[z.clone(), z])?;
        let sq = t.mul(&stacked, &stacked)?;
        t.sum(&sq)
    });
}

#[test]
fn fd_masked_weighted_sq_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pred = Tensor::param(3, 4, randn(3, 4, &mut rng));
    let entries = Rc::new(vec![(0usize, 1.0), (5, 0.0), (7, 1.0), (11, 0.0)]);
    let pc = pred.clone();
    check_op("masked loss", vec![pred], move |t| {
        t.masked_weighted_sq_loss(&pc, &entries, 0.4)
    });
}

#[test]
fn grad_check_linear_model_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = Tensor::param(4, 1, randn(4, 1, &mut rng));
    let x = Tensor::from_vec(6, 4, randn(6, 4, &mut rng));
    let wc = w.clone();
    let report = grad_check(
        move |t| {
            let y = t.matmul(&x, &wc)?;
            t.sum(&y)
        },
        &[w],
        1e-5,
        64,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn frozen_params_have_zero_analytic_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let frozen = Tensor::from_vec(3, 3, randn(3, 3, &mut rng));
    let live = Tensor::param(3, 3, randn(3, 3, &mut rng));
    let mut tape = Tape::new();
    let prod = tape.matmul(&frozen, &live).unwrap();
    let loss = tape.sum(&prod).unwrap();
    tape.backward(&loss).unwrap();
    assert!(frozen.grad().is_none());
    assert!(live.grad().is_some());
}

#[test]
fn grad_check_three_layer_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = Tensor::from_vec(5, 6, randn(5, 6, &mut rng));
    let w1 = Tensor::param(6, 8, randn(6, 8, &mut rng).iter().map(|v| v * 0.3).collect());
    let b1 = Tensor::param(1, 8, vec![0.1; 8]);
    let w2 = Tensor::param(8, 4, randn(8, 4, &mut rng).iter().map(|v| v * 0.3).collect());
    let b2 = Tensor::param(1, 4, vec![0.1; 4]);
    let w3 = Tensor::param(4, 1, randn(4, 1, &mut rng).iter().map(|v| v * 0.3).collect());
    let params = vec![w1.clone(), b1.clone(), w2.clone(), b2.clone(), w3.clone()];
    let report = grad_check(
        move |t| {
            let h1 = t.matmul(&x, &w1)?;
            let h1 = t.add_row_broadcast(&h1, &b1)?;
            let h1 = t.relu(&h1)?;
            let h2 = t.matmul(&h1, &w2)?;
            let h2 = t.add_row_broadcast(&h2, &b2)?;
            let h2 = t.sigmoid(&h2)?;
            let y = t.matmul(&h2, &w3)?;
            let sq = t.mul(&y, &y)?;
            t.sum(&sq)
        },
        &params,
        1e-5,
        32,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

#[test]
fn reused_tensor_accumulates_gradients() {
    let mut tape = Tape::new();
    let x = Tensor::param(1, 2, vec![2.0, 3.0]);
    let a = tape.mul(&x, &x).unwrap();
    let b = tape.add(&a, &x).unwrap(); // x used twice
    let loss = tape.sum(&b).unwrap();
    tape.backward(&loss).unwrap();
    // d(x^2 + x)/dx = 2x + 1
    assert_eq!(x.grad().unwrap(), vec![5.0, 7.0]);
}
