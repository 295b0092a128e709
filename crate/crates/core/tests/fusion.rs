mod common;

use common::*;
use mmdg_core::autodiff::{Graph, Tensor};
use mmdg_core::fusion::*;
use mmdg_core::nn::{Linear, ParamStore};
use ndarray::{s, Array2, ArrayD, Axis, IxDyn};

fn pair(cfg: FusionConfig, input_dim: usize, seed: u64) -> (ParamStore, PairFusion) {
    let mut store = ParamStore::new();
    let pf = PairFusion::new(&mut store, &mut rng(seed), "p", input_dim, cfg).unwrap();
    (store, pf)
}

fn run(store: &ParamStore, pf: &PairFusion, zp: &Array2<f64>, zq: &Array2<f64>) -> (Array2<f64>, Tensor, Tensor) {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let p = g.constant(zp.clone().into_dyn());
    let q = g.constant(zq.clone().into_dyn());
    let out = pf.forward(&mut g, &bind, p, q).unwrap();
    let o = g.value(out.output).clone().into_dimensionality().unwrap();
    (o, g.value(out.logits).clone(), g.value(out.weights).clone())
}

fn set_bias(store: &mut ParamStore, l: &Linear, mut f: impl FnMut(usize) -> f64) {
    for (i, b) in store.get_mut(l.bias).iter_mut().enumerate() {
        *b = f(i);
    }
}

#[test]
fn default_widths() {
    let cfg = FusionConfig::default();
    let (store, pf) = pair(cfg, 256, 0);
    let mut r = rng(1);
    let (o, _, w) = run(&store, &pf, &randn2(&mut r, 3, 256), &randn2(&mut r, 3, 256));
    assert_eq!(o.dim(), (3, 256));
    assert_eq!(w.shape(), &[3 * 8, 8, 8]);

    let mut store = ParamStore::new();
    let tf = TripleFusion::new(&mut store, &mut rng(2), "fusion", 256, cfg).unwrap();
    assert_eq!(tf.output_dim(), 768);
}

#[test]
fn single_token_with_identity_values_returns_the_value_token() {
    let cfg = FusionConfig { heads: 2, head_dim: 3, tokens: 1 };
    let (mut store, pf) = pair(cfg, 6, 3);
    let v = store.get_mut(pf.value.weight);
    v.fill(0.0);
    for i in 0..6 {
        v[[i, i]] = 1.0;
    }
    let mut r = rng(4);
    let zp = randn2(&mut r, 4, 6);
    let zq = randn2(&mut r, 4, 6);
    let (o, _, w) = run(&store, &pf, &zp, &zq);
    assert!(w.iter().all(|x| *x == 1.0));
    assert!((&o - &zq).iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn identical_keys_attend_uniformly_to_the_mean_value() {
    let cfg = FusionConfig { heads: 2, head_dim: 3, tokens: 4 };
    let (mut store, pf) = pair(cfg, 8, 5);
    // Zero key weights: every key token equals the key bias.
    store.get_mut(pf.key.weight).fill(0.0);
    set_bias(&mut store, &pf.key, |i| 0.1 * i as f64);
    set_bias(&mut store, &pf.value, |i| 0.5 - 0.2 * i as f64);
    let mut r = rng(6);
    let zp = randn2(&mut r, 2, 8);
    let zq = randn2(&mut r, 2, 8);
    let (o, _, w) = run(&store, &pf, &zp, &zq);
    assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));

    let wv: Array2<f64> = store.get(pf.value.weight).clone().into_dimensionality().unwrap();
    let bv = store.get(pf.value.bias);
    for n in 0..2 {
        let mut expect = vec![0.0; 6];
        for t in 0..4 {
            for c in 0..6 {
                let mut acc = bv[c];
                for k in 0..2 {
                    acc += zq[[n, t * 2 + k]] * wv[[k, c]];
                }
                expect[c] += acc / 4.0;
            }
        }
        for c in 0..6 {
            assert!((o[[n, c]] - expect[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_are_scaled_by_the_root_head_width() {
    let cfg = FusionConfig { heads: 2, head_dim: 4, tokens: 3 };
    let (store, pf) = pair(cfg, 6, 7);
    let mut r = rng(8);
    let zp = randn2(&mut r, 2, 6);
    let zq = randn2(&mut r, 2, 6);
    let (_, logits, _) = run(&store, &pf, &zp, &zq);
    let proj = |l: &Linear, z: &Array2<f64>, n: usize, t: usize| -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..8).map(|c| b[c] + (0..2).map(|k| z[[n, t * 2 + k]] * w[[k, c]]).sum::<f64>()).collect()
    };
    for n in 0..2 {
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let q = proj(&pf.query, &zp, n, i);
                    let k = proj(&pf.key, &zq, n, j);
                    let dot: f64 = (0..4).map(|d| q[h * 4 + d] * k[h * 4 + d]).sum();
                    assert!((logits[[n * 2 + h, i, j]] - dot / 2.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, pf) = pair(FusionConfig::default(), 256, 9);
    let mut r = rng(10);
    let (_, _, w) = run(&store, &pf, &(randn2(&mut r, 5, 256) * 3.0), &(randn2(&mut r, 5, 256) * 3.0));
    for row in w.lanes(Axis(2)) {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn permuting_key_tokens_leaves_output_unchanged() {
    let cfg = FusionConfig { heads: 4, head_dim: 8, tokens: 8 };
    let (store, pf) = pair(cfg, 64, 11);
    let mut r = rng(12);
    let zp = randn2(&mut r, 3, 64);
    let zq = randn2(&mut r, 3, 64);
    let perm = [3usize, 0, 7, 5, 1, 6, 2, 4];
    let mut zq_perm = zq.clone();
    for (dst, &src) in perm.iter().enumerate() {
        zq_perm.slice_mut(s![.., dst * 8..(dst + 1) * 8]).assign(&zq.slice(s![.., src * 8..(src + 1) * 8]));
    }
    let (a, _, _) = run(&store, &pf, &zp, &zq);
    let (b, _, _) = run(&store, &pf, &zp, &zq_perm);
    assert!((&a - &b).iter().all(|d| d.abs() <= 1e-10));
}

#[test]
fn swapping_query_and_key_roles_changes_the_output() {
    let (store, pf) = pair(FusionConfig::default(), 256, 13);
    let mut r = rng(14);
    let x = randn2(&mut r, 2, 256);
    let y = randn2(&mut r, 2, 256);
    let (a, _, _) = run(&store, &pf, &x, &y);
    let (b, _, _) = run(&store, &pf, &y, &x);
    assert!((&a - &b).iter().map(|d| d.abs()).sum::<f64>() > 1e-3);
}

#[test]
fn zero_inputs_give_zero_output() {
    let mut store = ParamStore::new();
    let tf = TripleFusion::new(&mut store, &mut rng(15), "fusion", 256, FusionConfig::default()).unwrap();
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let z = g.constant(ArrayD::zeros(IxDyn(&[2, 256])));
    let (fused, _) = tf.forward(&mut g, &bind, [z, z, z]).unwrap();
    assert_eq!(g.shape(fused), &[2, 768]);
    assert!(g.value(fused).iter().all(|v| *v == 0.0));
}

#[test]
fn triple_fusion_concatenates_pairs_in_fixed_order() {
    let mut store = ParamStore::new();
    let tf = TripleFusion::new(&mut store, &mut rng(16), "fusion", 256, FusionConfig::default()).unwrap();
    let mut r = rng(17);
    let z: Vec<Array2<f64>> = (0..3).map(|_| randn2(&mut r, 2, 256)).collect();
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let v: Vec<_> = z.iter().map(|a| g.constant(a.clone().into_dyn())).collect();
    let (fused, _) = tf.forward(&mut g, &bind, [v[0], v[1], v[2]]).unwrap();
    let fused = g.value(fused).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    // Vibration, current, acoustic are indices 0, 1, 2.
    for (k, (p, q)) in [(0, 1), (1, 2), (2, 0)].into_iter().enumerate() {
        let (o, _, _) = run(&store, &tf.pairs[k], &z[p], &z[q]);
        assert_eq!(fused.slice(s![.., k * 256..(k + 1) * 256]), o);
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let (store, pf) = pair(FusionConfig::default(), 256, 18);
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let a = g.constant(ArrayD::zeros(IxDyn(&[2, 256])));
    let b = g.constant(ArrayD::zeros(IxDyn(&[2, 128])));
    let c = g.constant(ArrayD::zeros(IxDyn(&[3, 256])));
    assert!(pf.forward(&mut g, &bind, a, b).is_err());
    assert!(pf.forward(&mut g, &bind, a, c).is_err());
    assert!(FusionConfig { tokens: 3, ..Default::default() }.validate(256).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = FusionConfig { heads: 2, head_dim: 3, tokens: 2 };
    let (mut store, pf) = pair(cfg, 8, 19);
    for l in [pf.query, pf.key, pf.value] {
        let mut r = rng(20 + l.bias.0 as u64);
        set_bias(&mut store, &l, |_| 0.3 * randn(&mut r, &[1])[0]);
    }
    let mut r = rng(21);
    let probe = randn(&mut r, &[3, 6]);
    let inputs = vec![randn(&mut r, &[3, 8]), randn(&mut r, &[3, 8])];

    let err = grad_check(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
        let bind = store.bind(g);
        let out = pf.forward(g, &bind, v[0], v[1]).unwrap();
        let w = g.constant(probe.clone());
        let m = g.mul(out.output, w);
        g.sum(m)
    });
    assert!(err <= 1e-4, "inputs {err}");

    // Projection parameters, perturbed in place.
    let loss = |store: &ParamStore| {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let p = g.constant(inputs[0].clone());
        let q = g.constant(inputs[1].clone());
        let out = pf.forward(&mut g, &bind, p, q).unwrap();
        let w = g.constant(probe.clone());
        let m = g.mul(out.output, w);
        let l = g.sum(m);
        (g, bind, l)
    };
    let (g, bind, l) = loss(&store);
    let grads = g.backward(l);
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for lin in [pf.query, pf.key, pf.value] {
        for id in [lin.weight, lin.bias] {
            let a = grads.get(bind.var(id)).expect("parameter gradient").clone();
            for e in 0..a.len() {
                let orig = store.get(id).as_slice_memory_order().unwrap()[e];
                store.get_mut(id).as_slice_memory_order_mut().unwrap()[e] = orig + h;
                let (gp, _, lp) = loss(&store);
                store.get_mut(id).as_slice_memory_order_mut().unwrap()[e] = orig - h;
                let (gm, _, lm) = loss(&store);
                store.get_mut(id).as_slice_memory_order_mut().unwrap()[e] = orig;
                analytic.push(a.as_slice_memory_order().unwrap()[e]);
                numeric.push((gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h));
            }
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err <= 1e-4, "projections {err}");
}
