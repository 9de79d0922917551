mod common;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use savc::eval::{self, cosine_sim, dtw_align, mcd, mcd_dtw, pearson, EvalConfig, EvalReport, MCD_SCALE};
use savc::nets;
use savc::train;

/// Minimum summed frame distance over every monotone path, by explicit
/// enumeration. Costs accumulate from the start of the path so that the
/// floating-point summation order matches a forward recurrence.
fn exhaustive_dtw(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    fn d(x: &Array2<f64>, y: &Array2<f64>, i: usize, j: usize) -> f64 {
        x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
    fn walk(x: &Array2<f64>, y: &Array2<f64>, i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = d(x, y, i, j) + acc;
        let (n, m) = (x.nrows(), y.nrows());
        if i + 1 == n && j + 1 == m {
            *best = best.min(acc);
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(x, y, i + 1, j + 1, acc, best);
        }
        if i + 1 < n {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < m {
            walk(x, y, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn dtw_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd7);
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..7), rng.random_range(1..7));
        let x = random(n, 2, &mut rng);
        let y = random(m, 2, &mut rng);
        let a = dtw_align(&x, &y).unwrap();
        assert_eq!(a.cost, exhaustive_dtw(&x, &y), "{n}x{m}");
        assert_eq!(a.path.first(), Some(&(0, 0)));
        assert_eq!(a.path.last(), Some(&(n - 1, m - 1)));
    }
}

#[test]
fn dtw_path_is_monotone_and_prices_its_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(10, 2, &mut rng);
    let y = random(12, 2, &mut rng);
    let a = dtw_align(&x, &y).unwrap();
    for w in a.path.windows(2) {
        let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)), "{step:?}");
    }
    let sum: f64 = a
        .path
        .iter()
        .map(|&(i, j)| (&x.row(i) - &y.row(j)).mapv(|v| v * v).sum().sqrt())
        .sum();
    assert!((sum - a.cost).abs() < 1e-12);
    assert!(dtw_align(&Array2::zeros((0, 2)), &y).is_err());
    assert!(dtw_align(&x, &Array2::zeros((3, 3))).is_err());
}

#[test]
fn mcd_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(30, 7, &mut rng);
    let y = random(30, 7, &mut rng);
    let mut acc = 0.0;
    for t in 0..30 {
        let mut s = 0.0;
        for k in 0..7 {
            s += (x[[t, k]] - y[[t, k]]).powi(2);
        }
        acc += s.sqrt();
    }
    let oracle = 10.0 * 2f64.sqrt() / 10f64.ln() * acc / 30.0;
    assert!((mcd(&x, &y).unwrap() - oracle).abs() <= 1e-6 * oracle);
    let offset = Array2::<f64>::zeros((5, 4)) + 0.1;
    assert!((mcd(&Array2::zeros((5, 4)), &offset).unwrap() - 1.2284).abs() < 1e-4);
    assert!((MCD_SCALE - 6.1419).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mcd_symmetric_and_linear(seed in any::<u64>(), c in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(8, 5, &mut rng);
        let delta = random(8, 5, &mut rng);
        let y = &x + &delta;
        let base = mcd(&x, &y).unwrap();
        prop_assert_eq!(mcd(&x, &x).unwrap(), 0.0);
        prop_assert!((base - mcd(&y, &x).unwrap()).abs() < 1e-12);
        let scaled = mcd(&x, &(&x + &(&delta * c))).unwrap();
        prop_assert!((scaled - c * base).abs() < 1e-9 * (1.0 + scaled));
    }

    #[test]
    fn alignment_never_hurts(seed in any::<u64>(), w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(w, 3, &mut rng);
        let y = random(w, 3, &mut rng);
        let a = dtw_align(&x, &y).unwrap();
        let plain: f64 = (0..w).map(|t| (&x.row(t) - &y.row(t)).mapv(|v| v * v).sum().sqrt()).sum();
        prop_assert!(a.cost <= plain + 1e-12);
        prop_assert!(mcd_dtw(&x, &x, false).unwrap() == 0.0);
    }

    #[test]
    fn pearson_affine_invariant(seed in any::<u64>(), s in 0.1f64..10.0, o in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = pearson(&a, &b, None).unwrap().unwrap();
        let moved: Vec<f64> = a.iter().map(|v| s * v + o).collect();
        prop_assert!((pearson(&moved, &b, None).unwrap().unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&a, &moved, None).unwrap().unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((pearson(&a, &neg, None).unwrap().unwrap() + 1.0).abs() < 1e-9);
    }
}

#[test]
fn pearson_closed_form_and_undefined_cases() {
    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0], None).unwrap().unwrap();
    // cov 4/4 over sqrt(5/4 * 5/4)
    assert!((r - 4.0 / 5.0).abs() < 1e-12);
    assert_eq!(pearson(&[2.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap(), None);
    assert_eq!(pearson(&[1.0, 2.0], &[3.0, 4.0], Some(&[true, false])).unwrap(), None);
    assert!(pearson(&[1.0], &[1.0, 2.0], None).is_err());
}

#[test]
fn cosine_analytic_cases() {
    assert!((cosine_sim(&[3.0, -1.0, 2.0], &[3.0, -1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
    assert!(cosine_sim(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn probe_on_noise_sits_in_chance_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(2000, 16, &mut rng);
    let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let r = eval::leakage_probe(&x, &labels, 4).unwrap();
    assert!((0.02..=0.25).contains(&r.accuracy), "{}", r.accuracy);
    assert!(!r.degenerate);
    assert_eq!(eval::leakage_probe(&x, &labels, 4).unwrap(), r);
}

#[test]
fn probe_separable_and_degenerate() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let onehot = Array2::from_shape_fn((50, 5), |(i, j)| f64::from(u8::from(labels[i] == j)));
    assert_eq!(eval::leakage_probe(&onehot, &labels, 0).unwrap().accuracy, 1.0);
    let constant = eval::leakage_probe(&onehot, &[3; 50], 0).unwrap();
    assert!(constant.degenerate);
    assert_eq!(constant.accuracy, 1.0);
    assert!(eval::leakage_probe(&onehot, &labels[..49], 0).is_err());
}

#[test]
fn prosody_proxy_shapes() {
    let mel = array![[0.0, 1.0], [1.0, 0.5], [2.0, 2.0]];
    let (f0, en) = eval::prosody_proxies(&mel, &array![1.0, -1.0]).unwrap();
    assert_eq!((f0.len(), en.len()), (3, 3));
    assert!(eval::prosody_proxies(&mel, &array![1.0]).is_err());
}

struct Trained {
    c: common::Corpus,
    main: nets::Checkpoint,
}

fn trained() -> Trained {
    let spec = common::small_spec();
    let c = common::corpus(&spec);
    let cfg = savc::train::TrainConfig {
        main_steps: 150,
        ..common::quick_train()
    };
    let teacher = train::pretrain_teacher(&c.ds, &common::model_for(&spec), &cfg, None).unwrap();
    let main = train::train_main(&c.ds, &teacher, &cfg, None).unwrap();
    Trained { c, main }
}

fn small_eval() -> EvalConfig {
    EvalConfig {
        n_pairs: 6,
        ..EvalConfig::default()
    }
}

#[test]
fn report_round_trips_and_csv_lists_pairs() {
    let t = trained();
    let pairs = eval::sample_pairs(&t.c.ds, 6, 3);
    assert_eq!(pairs.len(), 6);
    let r = eval::eval_report(&t.main, &t.c.ds, &pairs, &small_eval(), 3, 1).unwrap();
    assert_eq!(r.pairs.len(), 6);
    assert_eq!(r.mcd_skipped, 0);
    assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    assert_eq!(r.to_csv().lines().count(), 7);

    let d = tempfile::tempdir().unwrap();
    r.write(d.path().join("report")).unwrap();
    let text = std::fs::read_to_string(d.path().join("report.json")).unwrap();
    assert_eq!(EvalReport::from_json(&text).unwrap(), r);

    // Parallel scoring reproduces the serial report.
    let par = eval::eval_report(&t.main, &t.c.ds, &pairs, &small_eval(), 3, 4).unwrap();
    assert_eq!(par.to_json().unwrap(), r.to_json().unwrap());
}

#[test]
fn empty_pairs_report_probes_only() {
    let t = trained();
    let r = eval::eval_report(&t.main, &t.c.ds, &[], &small_eval(), 1, 1).unwrap();
    assert!(r.pairs.is_empty());
    assert_eq!((r.mcd_mean, r.f0_pearson_mean, r.ses_mean), (None, None, None));
    assert!((0.0..=1.0).contains(&r.probes.speaker_from_raw.accuracy));
}

#[test]
fn self_conversion_mcd_equals_reconstruction_mcd() {
    let t = trained();
    let pairs: Vec<(usize, String)> = t
        .c
        .ds
        .held_out_indices()
        .into_iter()
        .take(4)
        .map(|i| (i, t.c.ds.speakers[t.c.ds.speaker_ids[i]].clone()))
        .collect();
    let r = eval::eval_report(&t.main, &t.c.ds, &pairs, &small_eval(), 1, 1).unwrap();
    for p in &r.pairs {
        assert_eq!(p.mcd, Some(p.self_mcd));
    }
    assert_eq!(r.mcd_mean, r.self_mcd_mean);
}

#[test]
fn trained_beats_untrained() {
    let t = trained();
    let mut fresh = t.main.clone();
    let mut params = nets::init_main(&fresh.model, fresh.speakers.len(), fresh.train.asa_mode, 1234);
    for (k, v) in t.main.params.iter().filter(|(k, _)| k.starts_with("teacher.")) {
        params.insert(k.clone(), v.clone());
    }
    fresh.params = params;
    let pairs = eval::sample_pairs(&t.c.ds, 6, 8);
    let a = eval::eval_report(&t.main, &t.c.ds, &pairs, &small_eval(), 8, 1).unwrap();
    let b = eval::eval_report(&fresh, &t.c.ds, &pairs, &small_eval(), 8, 1).unwrap();
    assert!(a.mcd_mean.unwrap() < b.mcd_mean.unwrap(), "{:?} vs {:?}", a.mcd_mean, b.mcd_mean);
}

#[test]
fn report_needs_a_main_stage_checkpoint() {
    let t = trained();
    let mut c = t.main.clone();
    c.stage = nets::Stage::Teacher;
    assert!(eval::eval_report(&c, &t.c.ds, &[], &small_eval(), 1, 1).is_err());
}
