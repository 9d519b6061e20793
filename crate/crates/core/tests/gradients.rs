mod common;

use common::*;
use stimpute::losses::{fil_loss, recon_loss, total_loss};
use stimpute::model::{
    forward, input_embed, spatial_aggregate, spatial_factors, temporal_projected_attention,
    window_time_of_day,
};
use stimpute::spectral::dft_l1;
use stimpute::{Error, Graph, Tensor};

fn assert_probes(name: &str, probes: &[Probe], tol: f64) {
    let worst = max_rel_err(probes);
    assert!(
        worst < tol,
        "{name}: worst rel err {worst:e}, probes {probes:?}"
    );
}

#[test]
fn matmul_examples_and_gradient() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out), g.value(m));

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[0.0]);

    let mut r = rng(1);
    let inputs = [randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)];
    let probes = grad_probes(&inputs, 24, 2, |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        g.sum(c)
    });
    assert_probes("matmul", &probes, 1e-6);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn batched_matmul_gradient() {
    let mut r = rng(3);
    let inputs = [randn(&[2, 3, 4, 5], &mut r), randn(&[5, 3], &mut r)];
    let probes = grad_probes(&inputs, 30, 4, |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, c, 5)
    });
    assert_probes("batched matmul", &probes, 1e-6);
}

#[test]
fn softmax_examples_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax(x, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    assert!(v.iter().all(|x| x.is_finite()));

    let inputs = [randn(&[5], &mut rng(6))];
    let probes = grad_probes(&inputs, 20, 7, |g, v| {
        let s = g.softmax(v[0], 0).unwrap();
        weighted_sum(g, s, 8)
    });
    assert_probes("softmax", &probes, 1e-6);

    let inputs = [randn(&[3, 4, 5], &mut rng(9))];
    for axis in 0..3 {
        let probes = grad_probes(&inputs, 20, 10 + axis as u64, |g, v| {
            let s = g.softmax(v[0], axis).unwrap();
            weighted_sum(g, s, 11)
        });
        assert_probes("softmax axis", &probes, 1e-6);
    }
}

#[test]
fn layer_norm_examples_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4], 3.0));
    let gain = g.constant(Tensor::ones(&[4]));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain2 = g.constant(Tensor::ones(&[2]));
    let bias2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gain2, bias2, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);

    let mut r = rng(12);
    let inputs = [
        randn(&[4, 8], &mut r),
        randn(&[8], &mut r),
        randn(&[8], &mut r),
    ];
    let probes = grad_probes(&inputs, 40, 13, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, y, 14)
    });
    assert_probes("layer_norm", &probes, 1e-5);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap());
    let a = g.abs(x);
    assert_eq!(g.value(a).data(), &[2.0, 0.0, 3.0]);
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![2.0]]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), &Tensor::from_rows(&[vec![1.0, 2.0]]));

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 4], &mut rng(15)));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = randn(&[3, 2], &mut rng(16));
    let x = g.param(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().max_abs_diff(&xv.map(|v| 2.0 * v)) < 1e-15);
}

#[test]
fn non_scalar_backward_is_a_contract_error() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(17);
    // keep values away from the kinks of abs and relu
    let away = |t: Tensor| t.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let inputs = [
        away(randn(&[3, 4], &mut r)),
        randn(&[3, 4], &mut r),
        randn(&[4], &mut r),
        randn(&[3, 4], &mut r).map(|v| v.abs() + 0.5),
    ];
    let probes = grad_probes(&inputs, 60, 18, |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let b = g.mul(a, v[2]).unwrap();
        let c = g.sub(b, v[1]).unwrap();
        let d = g.abs(v[0]);
        let e = g.relu(v[0]);
        let f = g.gelu(c);
        let s = g.sqrt(v[3]);
        let rc = g.recip(v[3]);
        let sc = g.scale(d, 0.7);
        let sh = g.add_scalar(e, -0.2);
        let parts = [f, s, rc, sc, sh];
        let cat = g.concat(&parts, 0).unwrap();
        weighted_sum(g, cat, 19)
    });
    assert_probes("elementwise", &probes, 1e-5);
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(20);
    let inputs = [randn(&[2, 3, 4], &mut r), randn(&[2, 3, 2], &mut r)];
    let probes = grad_probes(&inputs, 60, 21, |g, v| {
        let c = g.concat(&[v[0], v[1]], 2).unwrap();
        let s = g.slice(c, 2, 1, 4).unwrap();
        let p = g.permute(s, &[2, 0, 1]).unwrap();
        let t = g.transpose(p).unwrap();
        let rs = g.reshape(t, &[4, 6]).unwrap();
        let m0 = g.sum_axis(rs, 0).unwrap();
        let m1 = g.mean_axis(rs, 1).unwrap();
        let e = g.expand(m1, &[3]);
        let a = weighted_sum(g, m0, 22);
        let b = weighted_sum(g, e, 23);
        let mean = g.mean(v[1]);
        let ab = g.add(a, b).unwrap();
        g.add(ab, mean).unwrap()
    });
    assert_probes("structural", &probes, 1e-6);
}

#[test]
fn linear_and_reuse_accumulate() {
    let mut r = rng(24);
    let inputs = [
        randn(&[5, 3], &mut r),
        randn(&[3, 4], &mut r),
        randn(&[4], &mut r),
    ];
    let probes = grad_probes(&inputs, 40, 25, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        // v[0] used twice: gradients must add up
        let y2 = g.linear(v[0], v[1], None).unwrap();
        let s = g.mul(y, y2).unwrap();
        weighted_sum(g, s, 26)
    });
    assert_probes("linear", &probes, 1e-6);
}

#[test]
fn two_layer_composite() {
    let mut r = rng(27);
    let inputs = [
        randn(&[6, 4], &mut r),
        randn(&[4, 8], &mut r),
        randn(&[8], &mut r),
        randn(&[8, 2], &mut r),
    ];
    let probes = grad_probes(&inputs, 50, 28, |g, v| {
        let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, v[3]).unwrap();
        let s = g.softmax(o, 1).unwrap();
        weighted_sum(g, s, 29)
    });
    assert_probes("composite", &probes, 1e-5);
}

#[test]
fn dft_l1_gradient() {
    for (shape, seed) in [([3usize, 5usize], 30u64), ([4, 8], 31), ([1, 7], 32)] {
        let inputs = [randn(&shape, &mut rng(seed))];
        let probes = grad_probes(&inputs, 20, seed + 100, |g, v| dft_l1(g, v[0]).unwrap());
        assert_probes("dft_l1", &probes, 1e-6);
    }
}

#[test]
fn loss_gradients() {
    let (n, t) = (3, 8);
    let mut r = rng(33);
    let target = randn(&[n, t], &mut r);
    let obs = random_mask(&[n, t], 0.7, 34);
    let whiten = obs
        .zip_map(&random_mask(&[n, t], 0.5, 35), |o, w| o * w)
        .unwrap();
    let missing = obs.zip_map(&whiten, |o, w| 1.0 - o * (1.0 - w)).unwrap();
    let pred = [randn(&[n, t], &mut r)];

    let probes = grad_probes(&pred, 30, 36, |g, v| {
        recon_loss(g, v[0], &target, &whiten, &obs).unwrap()
    });
    assert_probes("recon", &probes, 1e-4);
    let probes = grad_probes(&pred, 30, 37, |g, v| {
        fil_loss(g, v[0], &target, &missing).unwrap()
    });
    assert_probes("fil", &probes, 1e-4);
    let probes = grad_probes(&pred, 30, 38, |g, v| {
        total_loss(g, v[0], &target, &whiten, &obs, &missing, 0.3)
            .unwrap()
            .0
            .total
    });
    assert_probes("total", &probes, 1e-4);
}

#[test]
fn input_embedding_gradient() {
    let (n, t) = (3, 6);
    let x = randn(&[n, t], &mut rng(40));
    let mask = random_mask(&[n, t], 0.6, 41);
    let x = x.zip_map(&mask, |a, m| a * m).unwrap();
    let probes = model_probes(n, t, 42, 40, |g, cfg, p| {
        let z = input_embed(g, cfg, p, &x, &mask, &window_time_of_day(3, t, 24)).unwrap();
        weighted_sum(g, z, 43)
    });
    assert_probes("input embed", &probes, 1e-5);
}

#[test]
fn temporal_attention_gradient() {
    let (n, t) = (2, 6);
    let probes = model_probes(n, t, 44, 40, |g, cfg, p| {
        let z = g.constant(randn(&[n, t, cfg.model_dim], &mut rng(45)));
        let (out, _, _) = temporal_projected_attention(g, cfg, p, 0, z).unwrap();
        weighted_sum(g, out, 46)
    });
    assert_probes("temporal attention", &probes, 1e-5);
}

#[test]
fn spatial_attention_gradient() {
    let (n, t) = (4, 6);
    let probes = model_probes(n, t, 47, 40, |g, cfg, p| {
        let z = g.constant(randn(&[n, t, cfg.model_dim], &mut rng(48)));
        let (sq, sk) = spatial_factors(g, cfg, p, 1).unwrap();
        let out = spatial_aggregate(g, sq, sk, z).unwrap();
        weighted_sum(g, out, 49)
    });
    assert_probes("spatial attention", &probes, 1e-5);
}

#[test]
fn attention_gradient_wrt_hidden_state() {
    let (cfg, params) = small_model(3, 6, 50);
    let inputs = [randn(&[3, 6, cfg.model_dim], &mut rng(51))];
    let probes = grad_probes(&inputs, 40, 52, |g, v| {
        let p = params.bind(g);
        let (out, _, _) = temporal_projected_attention(g, &cfg, &p, 0, v[0]).unwrap();
        let (sq, sk) = spatial_factors(g, &cfg, &p, 0).unwrap();
        let out = spatial_aggregate(g, sq, sk, out).unwrap();
        weighted_sum(g, out, 53)
    });
    assert_probes("attention input", &probes, 1e-5);
}

#[test]
fn end_to_end_tiny_model_gradient() {
    let (n, t) = (3, 6);
    let mut r = rng(54);
    let y = randn(&[n, t], &mut r);
    let obs = random_mask(&[n, t], 0.8, 55);
    let whiten = obs
        .zip_map(&random_mask(&[n, t], 0.4, 56), |o, w| o * w)
        .unwrap();
    let input = obs.zip_map(&whiten, |o, w| o * (1.0 - w)).unwrap();
    let missing = input.map(|v| 1.0 - v);
    let x = y.zip_map(&input, |a, m| a * m).unwrap();
    let target = y.zip_map(&obs, |a, m| a * m).unwrap();
    let tod = window_time_of_day(0, t, 24);
    let probes = model_probes(n, t, 57, 60, |g, cfg, p| {
        let out = forward(g, cfg, p, &x, &input, &tod).unwrap();
        total_loss(g, out.prediction, &target, &whiten, &obs, &missing, 0.05)
            .unwrap()
            .0
            .total
    });
    assert_probes("end to end", &probes, 1e-4);
}
