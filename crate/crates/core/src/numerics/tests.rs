use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{scaled_dot_attention, FeedForward, GruCell};
use super::*;
use crate::error::DfmedError;

fn empty() -> ParamStore<f64> {
    ParamStore::new()
}

fn row(g: &mut Graph<'_, f64>, v: &[f64]) -> Var {
    g.constant(v.to_vec(), 1, v.len()).unwrap()
}

#[test]
fn matmul_identity() {
    let p = empty();
    let mut g = Graph::new(&p);
    let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
    let i = g.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let p = empty();
    let mut g = Graph::new(&p);
    let a = g.zeros(2, 3);
    let b = g.zeros(2, 3);
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, DfmedError::Shape { op: "matmul", .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn sigmoid_of_zero() {
    let p = empty();
    let mut g = Graph::new(&p);
    let x = row(&mut g, &[0.0]);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s), &[0.5]);
}

#[test]
fn mean_and_its_gradient() {
    let p = empty();
    let mut g = Graph::new(&p);
    let x = g.constant(vec![1.0, 2.0, 3.0, 6.0], 4, 1).unwrap();
    let m = g.mean_rows(x).unwrap();
    assert_eq!(g.value(m), &[3.0]);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.of(x).unwrap(), &[0.25; 4]);
}

#[test]
fn softmax_examples() {
    let p = empty();
    let mut g = Graph::new(&p);
    let x = row(&mut g, &[0.0, 0.0, 0.0]);
    let s = g.softmax_rows(x, None).unwrap();
    for &v in g.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = row(&mut g, &[1000.0, 0.0]);
    let s = g.softmax_rows(x, None).unwrap();
    assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s)[1] >= 0.0 && g.value(s)[1] < 1e-300_f64.max(1e-12));
    let x = row(&mut g, &[2f64.ln(), 0.0]);
    let s = g.softmax_rows(x, None).unwrap();
    assert!((g.value(s)[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((g.value(s)[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_excluded() {
    let p = empty();
    let mut g = Graph::new(&p);
    let x = g.constant(vec![1.0, 5.0, 1.0, 3.0], 2, 2).unwrap();
    let s = g.softmax_rows(x, Some(&[true, false, false, false])).unwrap();
    assert_eq!(g.value(s), &[1.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_normalised_and_shift_invariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = empty();
        let mut g = Graph::new(&p);
        let a = row(&mut g, &xs);
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let b = row(&mut g, &shifted);
        let sa = g.softmax_rows(a, None).unwrap();
        let sb = g.softmax_rows(b, None).unwrap();
        let total: f64 = g.value(sa).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_output_bounded(
        seed in 0u64..1000,
        h in prop::collection::vec(-3.0f64..3.0, 4),
        x in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = GruCell::new(&mut store, &mut rng, "gru", 6, 4).unwrap();
        let mut g = Graph::new(&store);
        let xv = row(&mut g, &x);
        let hv = row(&mut g, &h);
        let out = cell.forward(&mut g, xv, hv).unwrap();
        for (o, hp) in g.value(out).iter().zip(&h) {
            prop_assert!(o.abs() <= hp.abs().max(1.0) + 1e-12);
        }
    }
}

#[test]
fn attention_single_key_returns_value() {
    let p = empty();
    let mut g = Graph::new(&p);
    let q = row(&mut g, &[0.3, -1.2, 0.7, 2.0]);
    let k = row(&mut g, &[1.0, 1.0, -1.0, 0.5]);
    let v = row(&mut g, &[4.0, -2.0, 0.25, 9.0]);
    for heads in [1, 2] {
        let o = scaled_dot_attention(&mut g, q, k, v, heads, None).unwrap();
        for (a, b) in g.value(o).iter().zip(&[4.0, -2.0, 0.25, 9.0]) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let p = empty();
    let mut g = Graph::new(&p);
    let q = row(&mut g, &[0.5, 1.5]);
    let k = g.constant(vec![1.0, 2.0, 1.0, 2.0], 2, 2).unwrap();
    let v = g.constant(vec![1.0, 0.0, 3.0, 4.0], 2, 2).unwrap();
    let o = scaled_dot_attention(&mut g, q, k, v, 1, None).unwrap();
    assert!((g.value(o)[0] - 2.0).abs() < 1e-12);
    assert!((g.value(o)[1] - 2.0).abs() < 1e-12);
}

#[test]
fn attention_orthogonal_query_is_uniform() {
    let p = empty();
    let mut g = Graph::new(&p);
    let q = row(&mut g, &[0.0, 3.0]);
    let k = g.constant(vec![1.0, 0.0, -2.0, 0.0, 5.0, 0.0], 3, 2).unwrap();
    let v = g.constant(vec![3.0, 0.0, 6.0, 3.0, 0.0, 9.0], 3, 2).unwrap();
    let o = scaled_dot_attention(&mut g, q, k, v, 1, None).unwrap();
    assert!((g.value(o)[0] - 3.0).abs() < 1e-12);
    assert!((g.value(o)[1] - 4.0).abs() < 1e-12);
}

#[test]
fn attention_without_keys_is_zero() {
    let p = empty();
    let mut g = Graph::new(&p);
    let q = row(&mut g, &[1.0, 2.0]);
    let k = g.zeros(0, 2);
    let v = g.zeros(0, 3);
    let o = scaled_dot_attention(&mut g, q, k, v, 1, None).unwrap();
    assert_eq!(g.shape(o), (1, 3));
    assert!(g.value(o).iter().all(|&x| x == 0.0));
}

fn zero_all(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn gru_zero_weights_halves_state() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 2).unwrap();
    zero_all(&mut store);
    let mut g = Graph::new(&store);
    let x = row(&mut g, &[0.4, -0.1, 2.0]);
    let h = row(&mut g, &[0.8, -0.6]);
    let out = cell.forward(&mut g, x, h).unwrap();
    assert_eq!(g.value(out), &[0.4, -0.3]);
    let h0 = row(&mut g, &[0.0, 0.0]);
    let out = cell.forward(&mut g, x, h0).unwrap();
    assert_eq!(g.value(out), &[0.0, 0.0]);
}

#[test]
fn gru_dimension_mismatch() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 2).unwrap();
    let mut g = Graph::new(&store);
    let x = row(&mut g, &[0.4, -0.1]);
    let h = row(&mut g, &[0.8, -0.6]);
    assert!(cell.forward(&mut g, x, h).is_err());
}

#[test]
fn gru_gradient_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 2).unwrap();
    let x_id = store.add("x", Tensor::new(vec![1, 3], vec![0.3, -0.8, 1.1]).unwrap()).unwrap();
    let h_id = store.add("h", Tensor::new(vec![1, 2], vec![0.2, -0.4]).unwrap()).unwrap();
    let rep = grad_check(&mut store, 1e-4, None, |g| {
        let x = g.param(x_id);
        let h = g.param(h_id);
        let out = cell.forward(g, x, h)?;
        let sq = g.mul(out, out)?;
        Ok(g.sum_all(sq))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn ffn_zero_weights_emit_second_bias() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ffn = FeedForward::new(&mut store, &mut rng, "ffn", 2).unwrap();
    zero_all(&mut store);
    let b2 = ffn.down.b.unwrap();
    store.get_mut(b2).data = vec![0.7, -1.5];
    let mut g = Graph::new(&store);
    let x = row(&mut g, &[3.0, 4.0]);
    let y = ffn.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &[0.7, -1.5]);
}

#[test]
fn ffn_identity_like_projects_relu() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ffn = FeedForward::new(&mut store, &mut rng, "ffn", 2).unwrap();
    zero_all(&mut store);
    // up = [I | 0] (2x8), down = [I ; 0] (8x2)
    let up = &mut store.get_mut(ffn.up.w).data;
    up[0] = 1.0;
    up[8 + 1] = 1.0;
    let down = &mut store.get_mut(ffn.down.w).data;
    down[0] = 1.0;
    down[3] = 1.0;
    let mut g = Graph::new(&store);
    let x = row(&mut g, &[1.5, -2.0]);
    let y = ffn.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), &[1.5, 0.0]);
    let bad = row(&mut g, &[1.0, 2.0, 3.0]);
    assert!(ffn.forward(&mut g, bad).is_err());
}

#[test]
fn ffn_gradient_check() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ffn = FeedForward::new(&mut store, &mut rng, "ffn", 3).unwrap();
    let x_id = store.add("x", Tensor::new(vec![2, 3], vec![0.3, -0.8, 1.1, 0.5, 0.9, -0.2]).unwrap()).unwrap();
    let rep = grad_check(&mut store, 1e-4, None, |g| {
        let x = g.param(x_id);
        let y = ffn.forward(g, x)?;
        let t = g.tanh(y);
        Ok(g.sum_all(t))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn grad_check_sum_of_squares() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    {
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let sq = g.mul(xv, xv).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params[0].1, vec![2.0, 4.0]);
    }
    let rep = grad_check(&mut store, 1e-4, None, |g| {
        let xv = g.param(x);
        let sq = g.mul(xv, xv)?;
        Ok(g.sum_all(sq))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-8, "{rep:?}");
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::new(vec![1, 1], vec![-1.0]).unwrap()).unwrap();
    let res = grad_check(&mut store, 1e-4, None, |g| {
        let xv = g.param(x);
        let s = g.scale(xv, f64::INFINITY);
        Ok(g.sum_all(s))
    });
    assert!(res.is_err());
}

/// Every primitive op against central differences in one composite.
#[test]
fn composite_ops_gradient_check() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = store.add("a", nn::normal(&mut rng, &[3, 4], 1.0)).unwrap();
    let b = store.add("b", nn::normal(&mut rng, &[4, 2], 1.0)).unwrap();
    let c = store.add("c", nn::normal(&mut rng, &[1, 4], 1.0)).unwrap();
    let lg = store.add("lg", nn::normal(&mut rng, &[1, 4], 1.0)).unwrap();
    let lb = store.add("lb", nn::normal(&mut rng, &[1, 4], 1.0)).unwrap();
    let rep = grad_check(&mut store, 1e-4, None, |g| {
        let (a, b, c) = (g.param(a), g.param(b), g.param(c));
        let ab = g.matmul(a, b)?; // 3x2
        let abt = g.matmul_t(ab, ab)?; // 3x3
        let sm = g.softmax_rows(abt, None)?;
        let ac = g.add_row(a, c)?;
        let e = g.elu(ac, 1.0);
        let lr = g.leaky_relu(e, 0.2);
        let ln = {
            let (gg, bb) = (g.param(lg), g.param(lb));
            g.layer_norm(lr, gg, bb)?
        };
        let mix = g.matmul(sm, ln)?; // 3x4
        let tr = g.transpose(mix); // 4x3
        let s1 = g.slice_rows(tr, 1, 2)?;
        let s2 = g.slice_cols(mix, 0, 2)?;
        let gat = g.gather_rows(mix, &[2, 0, 2])?;
        let col = g.slice_cols(gat, 1, 1)?;
        let rw = g.slice_rows(c, 0, 1)?;
        let outer = g.add_col_row(col, rw)?;
        let sg = g.sigmoid(outer);
        let th = g.tanh(s1);
        let cc = g.concat_cols(&[s2, ab])?;
        let cr = g.concat_rows(&[cc, cc])?;
        let mr = g.mean_rows(cr)?;
        let ce = g.cross_entropy(outer, &[0, 3, 1])?;
        let bce = g.bce_with_logits(mr, &[1.0, 0.0, 1.0, 0.0])?;
        let s_sg = g.sum_all(sg);
        let s_th = g.mean_all(th);
        let t1 = g.add(ce, bce)?;
        let t2 = g.sub(s_sg, s_th)?;
        let t3 = g.mul(t1, t2)?;
        Ok(g.affine(t3, 0.5, 1.0))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}
