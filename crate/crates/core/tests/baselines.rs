mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use stimpute::baselines::{
    impute_als, impute_linear, impute_mean, run_baseline, AlsConfig, BaselineKind,
};
use stimpute::data::{apply_missing, synth_lowrank, MissingPatternSpec, SynthSpec};
use stimpute::spectral::svd_values;
use stimpute::{Error, Tensor};

fn rank_one(n: usize, t: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let u: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    let v: Vec<f64> = (0..t).map(|_| r.random_range(-2.0..2.0)).collect();
    Tensor::from_fn(&[n, t], |i| u[i / t] * v[i % t])
}

#[test]
fn als_recovers_noiseless_rank_one_from_thirty_percent() {
    let m = rank_one(20, 40, 1);
    let obs = random_mask(&[20, 40], 0.3, 2);
    // every row and column needs an observation for identifiability
    for i in 0..20 {
        assert!(obs.row(i).iter().any(|&o| o > 0.0));
    }
    let cfg = AlsConfig {
        rank: 1,
        reg: 1e-6,
        iters: 500,
        seed: 3,
    };
    let res = impute_als(&m, &obs, &cfg).unwrap();
    let err = res.low_rank.max_abs_diff(&m);
    assert!(err < 1e-4, "max abs error {err:e}");
}

#[test]
fn als_objective_is_monotone_for_many_seeds() {
    let ds = synth_lowrank(&SynthSpec {
        nodes: 12,
        steps: 60,
        rank: 3,
        noise: 0.2,
        steps_per_day: 24,
        seed: 4,
    })
    .unwrap();
    for seed in 0..10 {
        let obs = random_mask(&[12, 60], 0.5, 100 + seed);
        let cfg = AlsConfig {
            rank: 1 + seed as usize % 4,
            reg: 0.1,
            iters: 30,
            seed,
        };
        let res = impute_als(&ds.values, &obs, &cfg).unwrap();
        for w in res.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", res.objective);
        }
        assert!(svd_values(&res.low_rank).unwrap().numerical_rank(1e-9) <= cfg.rank);
    }
}

#[test]
fn als_with_zero_reg_on_degenerate_mask_advises_regularization() {
    let m = rank_one(4, 6, 5);
    let mut obs = Tensor::ones(&[4, 6]);
    for i in 0..4 {
        obs.set(i, 2, 0.0);
    }
    let cfg = AlsConfig {
        rank: 1,
        reg: 0.0,
        iters: 5,
        seed: 0,
    };
    match impute_als(&m, &obs, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("reg > 0"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn als_oversmooths_noisy_data() {
    // cumulative energy of the ALS completion sits above the raw data's
    let ds = synth_lowrank(&SynthSpec {
        nodes: 24,
        steps: 120,
        rank: 4,
        noise: 0.5,
        steps_per_day: 24,
        seed: 6,
    })
    .unwrap();
    let obs = apply_missing(&ds, &MissingPatternSpec::point(0.3, 7)).unwrap();
    let cfg = AlsConfig {
        rank: 4,
        reg: 0.1,
        iters: 50,
        seed: 8,
    };
    let res = impute_als(&ds.values, &obs, &cfg).unwrap();
    let raw = svd_values(&ds.values).unwrap().cumulative_energy();
    let als = svd_values(&res.low_rank).unwrap().cumulative_energy();
    for k in 0..4 {
        assert!(als[k] >= raw[k], "k={k}: als {} raw {}", als[k], raw[k]);
    }
}

#[test]
fn baseline_kinds_deserialize_from_tagged_json() {
    let k: BaselineKind =
        serde_json::from_str(r#"{"kind":"als_mf","rank":2,"reg":0.5,"iters":3}"#).unwrap();
    assert_eq!(
        k,
        BaselineKind::AlsMf(AlsConfig {
            rank: 2,
            reg: 0.5,
            iters: 3,
            seed: 0
        })
    );
    let k: BaselineKind = serde_json::from_str(r#"{"kind":"linear_interp"}"#).unwrap();
    assert_eq!(k, BaselineKind::LinearInterp);
}

#[test]
fn mean_and_linear_examples() {
    let v = Tensor::from_rows(&[vec![2.0, 0.0, 4.0], vec![0.0, 0.0, 0.0]]);
    let o = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
    let m = impute_mean(&v, &o).unwrap();
    assert_eq!(m.row(0), &[2.0, 3.0, 4.0]);
    assert_eq!(m.row(1), &[3.0, 3.0, 3.0]);

    let v = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0, 4.0, 0.0]]);
    let o = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]]);
    assert_eq!(
        impute_linear(&v, &o).unwrap().row(0),
        &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0]
    );
    assert!(impute_mean(&v, &Tensor::zeros(&[1, 6])).is_err());
}

fn masked_matrix() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..5, 2usize..12).prop_flat_map(|(n, t)| {
        (
            prop::collection::vec(-10.0f64..10.0, n * t),
            prop::collection::vec(prop::bool::weighted(0.6), n * t),
        )
            .prop_map(move |(v, o)| {
                let mut o: Vec<f64> = o.into_iter().map(|b| b as u8 as f64).collect();
                o[0] = 1.0;
                (
                    Tensor::new(vec![n, t], v).unwrap(),
                    Tensor::new(vec![n, t], o).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_baseline_preserves_observed_cells((v, o) in masked_matrix()) {
        let (n, t) = v.dims2().unwrap();
        let kinds = [
            BaselineKind::Mean,
            BaselineKind::LinearInterp,
            BaselineKind::AlsMf(AlsConfig { rank: 1.max(n.min(t) / 2), reg: 0.1, iters: 5, seed: 1 }),
        ];
        for kind in &kinds {
            let out = run_baseline(kind, &v, &o).unwrap();
            prop_assert!(out.all_finite());
            for i in 0..v.len() {
                if o.data()[i] > 0.0 {
                    prop_assert_eq!(out.data()[i].to_bits(), v.data()[i].to_bits());
                }
            }
        }
    }
}
