mod common;

use common::*;
use proptest::prelude::*;
use stimpute::data::{
    apply_missing, load_csv, load_mask_csv, make_windows, save_csv, save_mask_csv, synth_lowrank,
    Dataset, MissingKind, MissingPatternSpec, Normalizer, SplitRatios, SynthSpec, WhitenSpec,
};
use stimpute::spectral::svd_values;
use stimpute::{Error, Tensor};

fn synth(nodes: usize, steps: usize, seed: u64) -> Dataset {
    synth_lowrank(&SynthSpec {
        nodes,
        steps,
        rank: 5.min(nodes),
        noise: 0.1,
        steps_per_day: 24,
        seed,
    })
    .unwrap()
}

fn missing_fraction(m: &Tensor) -> f64 {
    m.data().iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64
}

#[test]
fn point_rate_is_respected_over_many_cells() {
    let ds = Dataset::new(Tensor::zeros(&[100, 1000]), Tensor::ones(&[100, 1000]), 24).unwrap();
    let m = apply_missing(&ds, &MissingPatternSpec::point(0.25, 3)).unwrap();
    let rate = missing_fraction(&m);
    assert!((rate - 0.25).abs() < 0.01, "{rate}");
}

#[test]
fn unavailable_cells_are_never_observed() {
    let avail = random_mask(&[10, 200], 0.8, 4);
    let ds = Dataset::new(Tensor::zeros(&[10, 200]), avail.clone(), 24).unwrap();
    for spec in [
        MissingPatternSpec::point(0.3, 5),
        MissingPatternSpec::block(5),
    ] {
        let m = apply_missing(&ds, &spec).unwrap();
        assert!(m.data().iter().zip(avail.data()).all(|(o, a)| *o <= *a));
    }
}

#[test]
fn block_outages_have_bounded_durations() {
    let ds = Dataset::new(Tensor::zeros(&[200, 600]), Tensor::ones(&[200, 600]), 24).unwrap();
    let spec = MissingPatternSpec {
        kind: MissingKind::Block,
        drop_rate: 0.0,
        failure_prob: 0.0005,
        ..MissingPatternSpec::block(6)
    };
    let m = apply_missing(&ds, &spec).unwrap();
    let (mut runs, mut in_bounds) = (0, 0);
    for i in 0..200 {
        let row = m.row(i);
        let mut t = 0;
        while t < row.len() {
            if row[t] == 0.0 {
                let start = t;
                while t < row.len() && row[t] == 0.0 {
                    t += 1;
                }
                // runs cut by the series end are shorter by construction
                if t < row.len() {
                    let len = t - start;
                    assert!(len >= 12, "run of {len}");
                    runs += 1;
                    in_bounds += (len <= 48) as usize;
                }
            } else {
                t += 1;
            }
        }
    }
    assert!(runs > 20);
    // only merged overlapping outages can exceed the upper bound
    assert!(in_bounds as f64 / runs as f64 > 0.9);
}

#[test]
fn block_default_rate_is_plausible() {
    // drop 5% plus outages: 0.0015 · 30 mean steps ≈ 4.4% more
    let ds = Dataset::new(Tensor::zeros(&[100, 2000]), Tensor::ones(&[100, 2000]), 24).unwrap();
    let rate = missing_fraction(&apply_missing(&ds, &MissingPatternSpec::block(7)).unwrap());
    assert!((0.07..0.12).contains(&rate), "{rate}");
}

#[test]
fn combined_whitening_averages_one_half() {
    let ds = synth(8, 3011, 8);
    let obs = Tensor::ones(&[8, 3011]);
    let norm = Normalizer::fit(&ds.values, &obs).unwrap();
    let ws = make_windows(&ds, &obs, &norm, 12, 1, &WhitenSpec::combined_default(), 9).unwrap();
    assert_eq!(ws.len(), 3000);
    let mean: f64 = ws
        .iter()
        .map(|w| w.whiten_mask.sum() / w.obs_mask.sum())
        .sum::<f64>()
        / ws.len() as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

#[test]
fn every_window_satisfies_mask_invariants() {
    let ds = synth(6, 500, 10);
    let obs = apply_missing(&ds, &MissingPatternSpec::block(11)).unwrap();
    let obs = obs
        .zip_map(&random_mask(&[6, 500], 0.8, 12), |a, b| a * b)
        .unwrap();
    let norm = Normalizer::fit(&ds.values, &obs).unwrap();
    for spec in [WhitenSpec::Fixed(0.25), WhitenSpec::combined_default()] {
        let ws = make_windows(&ds, &obs, &norm, 24, 5, &spec, 13).unwrap();
        assert!(!ws.is_empty());
        for w in &ws {
            w.check().unwrap();
            let input = w.input_mask();
            for i in 0..w.len() {
                let (o, e, h) = (
                    w.obs_mask.data()[i],
                    w.eval_mask.data()[i],
                    w.whiten_mask.data()[i],
                );
                assert!(o * e == 0.0 && h <= o);
                if input.data()[i] == 0.0 {
                    assert_eq!(w.x.data()[i], 0.0);
                }
            }
        }
    }
}

#[test]
fn synthetic_energy_is_concentrated_in_rank() {
    let ds = synth(32, 480, 14);
    let e = svd_values(&ds.values).unwrap().cumulative_energy();
    assert!(e[4] > 0.9, "{:?}", &e[..6]);
}

#[test]
fn noiseless_synthesis_has_exact_rank() {
    let ds = synth_lowrank(&SynthSpec {
        nodes: 10,
        steps: 96,
        rank: 3,
        noise: 0.0,
        steps_per_day: 24,
        seed: 15,
    })
    .unwrap();
    assert_eq!(svd_values(&ds.values).unwrap().numerical_rank(1e-10), 3);
}

#[test]
fn synthesis_is_seeded() {
    assert_eq!(synth(5, 50, 16).values, synth(5, 50, 16).values);
    assert_ne!(synth(5, 50, 16).values, synth(5, 50, 17).values);
}

#[test]
fn normalizer_roundtrip_and_observed_only_statistics() {
    let ds = synth(4, 100, 18);
    let obs = random_mask(&[4, 100], 0.6, 19);
    let norm = Normalizer::fit(&ds.values, &obs).unwrap();
    let back = norm.denormalize(&norm.normalize(&ds.values));
    assert!(back.max_abs_diff(&ds.values) < 1e-12);
    let poisoned = ds
        .values
        .zip_map(&obs, |v, o| if o > 0.0 { v } else { 1e9 })
        .unwrap();
    assert_eq!(Normalizer::fit(&poisoned, &obs).unwrap(), norm);
}

#[test]
fn split_ranges_partition_the_series() {
    let [a, b, c] = SplitRatios::default().ranges(1000).unwrap();
    assert_eq!((a.start, a.end, b.end, c.end), (0, 700, 800, 1000));
}

#[test]
fn csv_parse_errors_locate_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "s0,s1\n1.0,2.0\n3.0,oops\n").unwrap();
    match load_csv(&p, 24) {
        Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (3, 2)),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_roundtrip_is_exact(
        (n, t, vals) in (1usize..5, 1usize..8).prop_flat_map(|(n, t)| {
            (Just(n), Just(t), prop::collection::vec(prop::num::f64::NORMAL, n * t))
        }),
        keep in prop::collection::vec(any::<bool>(), 40),
    ) {
        let avail = Tensor::from_fn(&[n, t], |i| if keep[i % 40] { 1.0 } else { 0.0 });
        let values = Tensor::new(vec![n, t], vals).unwrap().zip_map(&avail, |v, a| v * a).unwrap();
        let ds = Dataset::new(values, avail.clone(), 24).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p, 24).unwrap();
        prop_assert_eq!(&back.available, &ds.available);
        prop_assert_eq!(&back.sensor_ids, &ds.sensor_ids);
        for ((a, b), m) in back.values.data().iter().zip(ds.values.data()).zip(avail.data()) {
            if *m > 0.0 {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let mp = dir.path().join("m.csv");
        save_mask_csv(&avail, &ds.sensor_ids, &mp).unwrap();
        prop_assert_eq!(load_mask_csv(&mp).unwrap(), avail);
    }
}
