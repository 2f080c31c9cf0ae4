mod common;

use margin_cert::bounds::*;
use margin_cert::data::{make_split, parse_csv, LabelColumn};
use margin_cert::numkern::{categorical_entropy, dirichlet_kl, kl_inv, small_kl};
use margin_cert::voters::{predict_matrix, train_forest, ForestConfig};
use margin_cert::votes::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unanimous(m: usize, d: usize) -> PredictionMatrix {
    let labels: Vec<usize> = (0..m).map(|r| 1 + r % 2).collect();
    let preds: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, d)).collect();
    PredictionMatrix::from_flat(preds, labels, d, 2).unwrap()
}

fn ln_conf(m: usize, delta: f64) -> f64 {
    (2.0 * (m as f64).sqrt() / delta).ln()
}

#[test]
fn thm1_comparison_configuration() {
    let (m, d) = (2000, 100);
    let p = unanimous(m, d);
    let spec = BoundSpec::new(m, 0.5, 2).unwrap();
    for (k, want_dkl, want) in [
        (100.0, 0.0, 0.046_385_863_296_745_364),
        (50.0, 21.470_029_256_765_262, 0.321_315_962_966_533_85),
    ] {
        let wp = WeightPosterior::uniform(d, k).unwrap();
        let r = thm1_bound(&p, &wp, 0.2, &spec).unwrap();
        let eps = (-(k + 1.0) * 0.04f64).exp();
        assert_eq!(r.empirical_term, 0.0);
        assert!((r.derandomisation_term - eps).abs() < 1e-16);
        let dkl = dirichlet_kl(&wp.alpha(), &vec![1.0; d]).unwrap();
        assert!((dkl - want_dkl).abs() < 1e-10);
        assert!((r.complexity_term - (dkl + ln_conf(m, 0.5)) / m as f64).abs() < 1e-15);
        let c = r.complexity_term;
        let v = kl_inv(eps, c);
        assert!((small_kl(eps, v) - c).abs() < 1e-9);
        assert!((r.value - want).abs() < 1e-12, "K={k}: {} vs {want}", r.value);
        assert!((r.value - r.reconstruct()).abs() < 1e-9);
    }
}

#[test]
fn gz_comparison_configuration() {
    let r = gz_from_loss(0.1, 100, 0.3, 10_000, 0.5).unwrap();
    assert!((r.complexity_term - 0.208_516_741_552_514_77).abs() < 1e-14);
    assert!((r.value - 0.385_982_580_227_752_53).abs() < 1e-12);
    assert!(gz_from_loss(0.1, 100, 0.14, 10_000, 0.5).is_err());
    assert!(gz_from_loss(0.1, 2, 0.9, 10_000, 0.5).is_err());
    assert_eq!(gz_from_loss(1.0, 100, 0.3, 10_000, 0.5).unwrap().value, 1.0);
}

#[test]
fn bgplus_changes_at_integer_steps_of_t() {
    let gamma = 0.1;
    let (d, delta, loss) = (50, 0.1, 0.05);
    let m = (1000..1100).find(|&m| bgplus_t(gamma, m + 1) == bgplus_t(gamma, m) + 1).unwrap();
    for mm in [m, m + 1] {
        let t = (2.0 / (gamma * gamma) * (mm as f64).ln()).ceil();
        assert_eq!(bgplus_t(gamma, mm) as f64, t);
        let inv_m = 1.0 / mm as f64;
        let c = (t * (d as f64).ln() + ln_conf(mm, delta)) / mm as f64;
        let want = (kl_inv(loss + inv_m, c) + inv_m).min(1.0);
        let got = bgplus_from_loss(loss, d, gamma, mm, delta);
        assert!((got.value - want).abs() < 1e-14, "m={mm}");
        assert_eq!(got.t_star, Some(t as u64));
    }
}

#[test]
fn bg_original_zero_loss_and_vacuity() {
    let (m, d, gamma, delta) = (5000, 30, 0.2, 0.05);
    let c = 2.0 * (2.0f64 / delta).ln() + 4.75 / (gamma * gamma) * (d as f64).ln() * (m as f64).ln();
    let r = bg_original_from_loss(0.0, d, gamma, m, delta);
    assert!((r.value - (c + c.sqrt() + 2.0) / m as f64).abs() < 1e-14);
    assert_eq!(bg_original_from_loss(0.0, d, 0.001, m, delta).value, 1.0);
}

#[test]
fn bgplusplus_uniform_theta_drops_complexity() {
    let (m, d, gamma, delta, loss) = (3000, 40, 0.15, 0.2, 0.02);
    let entropy = categorical_entropy(&vec![1.0 / d as f64; d]);
    let got = bgplusplus_from_loss(loss, d, entropy, gamma, m, delta, 400);
    let c = (m as f64 / delta).ln() / m as f64;
    let want = (1..=400)
        .map(|t| {
            let eps = (-0.5 * t as f64 * gamma * gamma).exp();
            kl_inv((loss + eps).min(1.0), c) + eps
        })
        .fold(f64::INFINITY, f64::min);
    assert!((got.value - want).abs() < 1e-12, "{} vs {want}", got.value);
    let one = bgplusplus_from_loss(loss, d, 0.0, gamma, m, delta, 1);
    assert_eq!(one.t_star, Some(1));
}

#[test]
fn categorical_bounds_recompute() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = common::random_matrix(&mut rng, 300, 6, 2, 0.7);
    let theta = [0.3, 0.1, 0.2, 0.15, 0.15, 0.1];
    let spec = BoundSpec::new(300, 0.05, 2).unwrap();
    let kl_cat = (6f64).ln() - categorical_entropy(&theta);
    let conf = ln_conf(300, 0.05);
    let fo = fo_bound(&p, &theta, &spec).unwrap();
    let want = (2.0 * kl_inv(gibbs_loss(&p, &theta), (kl_cat + conf) / 300.0)).min(1.0);
    assert!((fo.value - want).abs() < 1e-14);
    let so = so_bound(&p, &theta, &spec).unwrap();
    let want = (4.0 * kl_inv(tandem_loss(&p, &theta), (2.0 * kl_cat + conf) / 300.0)).min(1.0);
    assert!((so.value - want).abs() < 1e-14);
    let bin = bin_bound(&p, &theta, &spec, 100).unwrap();
    let want = (2.0 * kl_inv(binomial_loss(&p, &theta, 100), (100.0 * kl_cat + conf) / 300.0)).min(1.0);
    assert!((bin.value - want).abs() < 1e-14);
    let all_right = unanimous(200, 4);
    let spec = BoundSpec::new(200, 0.05, 2).unwrap();
    let so = so_bound(&all_right, &[0.25; 4], &spec).unwrap();
    let c = ln_conf(200, 0.05) / 200.0;
    assert!((so.value - 4.0 * (1.0 - (-c).exp())).abs() < 1e-14);
}

#[test]
fn f2_keeps_the_factor_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = common::random_matrix(&mut rng, 200, 5, 2, 0.65);
    let spec = BoundSpec::new(200, 0.05, 2).unwrap();
    let wp = WeightPosterior::new(vec![0.3, 0.2, 0.2, 0.2, 0.1], 7.0).unwrap();
    let r = f2_bound(&p, &wp, &spec).unwrap();
    let e = expected_zero_one_loss_beta(&p, &wp.alpha());
    assert!((r.empirical_term - e).abs() < 1e-15);
    assert!(r.value >= (2.0 * e).min(1.0));
}

#[test]
fn zero_kl_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let p = common::random_matrix(&mut rng, 500, d, 2, 0.7);
    let spec = BoundSpec::new(500, 0.05, 2).unwrap();
    let wp = WeightPosterior::uniform(d, d as f64).unwrap();
    for gamma in [0.01, 0.1, 0.3] {
        let r = thm1_bound(&p, &wp, gamma, &spec).unwrap();
        let eps = (-(d as f64 + 1.0) * gamma * gamma).exp();
        let loss = empirical_margin_loss(&p, &wp, gamma);
        let want = (kl_inv((loss + eps).min(1.0), ln_conf(500, 0.05) / 500.0) + eps).min(1.0);
        assert_eq!(r.value, want);
    }
}

#[test]
fn certify_beats_a_coarse_exhaustive_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = common::random_matrix(&mut rng, 400, 10, 2, 0.7);
    let spec = BoundSpec::new(400, 0.05, 2).unwrap();
    let theta = vec![0.1; 10];
    let cfg = SearchConfig { n_gamma: 40, ..SearchConfig::default() };
    let got = certify(&p, &WeightPosterior::new(theta.clone(), 1.0).unwrap(), &spec, BoundKind::Thm1, &cfg).unwrap();
    let grid_spec = spec.with_delta(0.05 / 40.0);
    let mut coarse = f64::INFINITY;
    for &g in &cfg.gamma_grid() {
        for j in 0..=32 {
            let k = 2f64.powf(j as f64 / 2.0);
            let wp = WeightPosterior::new(theta.clone(), k).unwrap();
            coarse = coarse.min(thm1_bound(&p, &wp, g, &grid_spec).unwrap().value);
        }
    }
    assert!(got.value <= coarse * (1.0 + 1e-3), "{} vs {coarse}", got.value);
    let again = certify(&p, &WeightPosterior::new(theta, 1.0).unwrap(), &spec, BoundKind::Thm1, &cfg).unwrap();
    assert_eq!(got, again);
}

#[test]
fn singleton_grid_is_the_direct_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = common::random_matrix(&mut rng, 250, 6, 2, 0.7);
    let spec = BoundSpec::new(250, 0.1, 2).unwrap();
    let theta = vec![0.3, 0.2, 0.2, 0.1, 0.1, 0.1];
    let cfg = SearchConfig { gammas: Some(vec![0.12]), k_search: false, ..SearchConfig::default() };
    let wp = WeightPosterior::new(theta.clone(), 4.0).unwrap();
    let c = certify(&p, &wp, &spec, BoundKind::Thm1, &cfg).unwrap();
    assert_eq!(c.value, thm1_bound(&p, &wp, 0.12, &spec).unwrap().value);
    let c = certify(&p, &wp, &spec, BoundKind::BgPlus, &cfg).unwrap();
    assert_eq!(c.value, bgplus_bound(&p, &theta, 0.12, &spec).unwrap().value);
}

#[test]
fn ordering_of_the_bg_family_on_a_random_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let d = rng.random_range(2..500);
        let m = rng.random_range(50..100_000);
        let delta = rng.random_range(0.001..0.5);
        let gamma = 10f64.powf(rng.random_range(-3.0..-0.31));
        let loss = rng.random_range(0.0..0.6);
        let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let h = categorical_entropy(&raw.iter().map(|x| x / s).collect::<Vec<_>>());
        let bg = bg_original_from_loss(loss, d, gamma, m, delta).value;
        let plus = bgplus_from_loss(loss, d, gamma, m, delta).value;
        let pp = bgplusplus_from_loss(loss, d, h, gamma, m, delta, bgplusplus_default_t_max(gamma, m)).value;
        assert!(bg >= plus - 1e-12 && plus >= pp - 1e-12, "d={d} m={m} γ={gamma}: {bg} {plus} {pp}");
    }
}

#[test]
fn certified_values_cover_held_out_error() {
    let ds = parse_csv(&common::fixture("tic-tac-toe.data"), &LabelColumn::Last, false).unwrap();
    let kinds = [
        BoundKind::Thm1,
        BoundKind::Thm2,
        BoundKind::Gz,
        BoundKind::BgPlus,
        BoundKind::BgOriginal,
        BoundKind::BgPlusPlus,
        BoundKind::Fo,
        BoundKind::So,
        BoundKind::Bin,
        BoundKind::F2,
    ];
    let mut covered = vec![0; kinds.len()];
    let trials = 20;
    for seed in 0..trials {
        let plan = make_split(ds.num_rows(), seed, true).unwrap();
        let cfg = ForestConfig { seed, ..ForestConfig::default() };
        let forest = train_forest(&ds.subset(&plan.voter_idx), &cfg).unwrap();
        let p = predict_matrix(&forest, &ds.subset(&plan.bound_idx)).unwrap();
        let test = predict_matrix(&forest, &ds.subset(&plan.test_idx)).unwrap();
        let wp = WeightPosterior::uniform(p.num_voters(), 1.0).unwrap();
        let test_error = majority_vote_error(&test, wp.theta());
        let spec = BoundSpec::for_matrix(&p, 0.05).unwrap();
        for (i, &kind) in kinds.iter().enumerate() {
            let r = certify(&p, &wp, &spec, kind, &SearchConfig::default()).unwrap();
            assert!((0.0..=1.0).contains(&r.value));
            if r.value >= test_error {
                covered[i] += 1;
            }
        }
    }
    for (kind, c) in kinds.iter().zip(&covered) {
        assert!(*c >= 19, "{kind}: covered {c}/{trials}");
    }
}

proptest! {
    #[test]
    fn bounds_shrink_with_more_confidence_budget_and_data(
        loss in 0.0f64..0.7,
        gamma in 0.01f64..0.45,
        k in 0.5f64..500.0,
        dkl in 0.0f64..50.0,
        d in 3usize..200,
        m in 20usize..50_000,
        d1 in 0.001f64..0.99,
        d2 in 0.001f64..0.99,
    ) {
        let (dlo, dhi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let h = 0.5 * (d as f64).ln();
        let pairs: Vec<(f64, f64, f64, f64)> = vec![
            (thm1_from_loss(loss, dkl, k, gamma, m, dlo).value, thm1_from_loss(loss, dkl, k, gamma, m, dhi).value,
             thm1_from_loss(loss, dkl, k, gamma, m, dlo).value, thm1_from_loss(loss, dkl, k, gamma, 2 * m, dlo).value),
            (thm2_from_loss(loss, dkl, k, gamma, m, dlo).value, thm2_from_loss(loss, dkl, k, gamma, m, dhi).value,
             thm2_from_loss(loss, dkl, k, gamma, m, dlo).value, thm2_from_loss(loss, dkl, k, gamma, 2 * m, dlo).value),
            (bgplus_from_loss(loss, d, gamma, m, dlo).value, bgplus_from_loss(loss, d, gamma, m, dhi).value,
             bgplus_from_loss(loss, d, gamma, m, dlo).value, bgplus_from_loss(loss, d, gamma, 2 * m, dlo).value),
            (bg_original_from_loss(loss, d, gamma, m, dlo).value, bg_original_from_loss(loss, d, gamma, m, dhi).value,
             bg_original_from_loss(loss, d, gamma, m, dlo).value, bg_original_from_loss(loss, d, gamma, 2 * m, dlo).value),
            (bgplusplus_from_loss(loss, d, h, gamma, m, dlo, 50).value, bgplusplus_from_loss(loss, d, h, gamma, m, dhi, 50).value,
             bgplusplus_from_loss(loss, d, h, gamma, m, dlo, 50).value, bgplusplus_from_loss(loss, d, h, gamma, 2 * m, dlo, 50).value),
            (fo_from_loss(loss, dkl, m, dlo).value, fo_from_loss(loss, dkl, m, dhi).value,
             fo_from_loss(loss, dkl, m, dlo).value, fo_from_loss(loss, dkl, 2 * m, dlo).value),
            (so_from_loss(loss, dkl, m, dlo).value, so_from_loss(loss, dkl, m, dhi).value,
             so_from_loss(loss, dkl, m, dlo).value, so_from_loss(loss, dkl, 2 * m, dlo).value),
            (bin_from_loss(loss, dkl, 100, m, dlo).value, bin_from_loss(loss, dkl, 100, m, dhi).value,
             bin_from_loss(loss, dkl, 100, m, dlo).value, bin_from_loss(loss, dkl, 100, 2 * m, dlo).value),
            (f2_from_loss(loss, dkl, k, m, dlo).value, f2_from_loss(loss, dkl, k, m, dhi).value,
             f2_from_loss(loss, dkl, k, m, dlo).value, f2_from_loss(loss, dkl, k, 2 * m, dlo).value),
        ];
        for (i, (a, b, c, e)) in pairs.into_iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&e));
            prop_assert!(a >= b - 1e-12, "bound {} not monotone in δ: {} < {}", i, a, b);
            prop_assert!(c >= e - 1e-12, "bound {} not monotone in m: {} < {}", i, c, e);
        }
        if gamma > (2.0 / d as f64).sqrt() {
            let a = gz_from_loss(loss, d, gamma, m, dlo).unwrap().value;
            let b = gz_from_loss(loss, d, gamma, m, dhi).unwrap().value;
            let e = gz_from_loss(loss, d, gamma, 2 * m, dlo).unwrap().value;
            prop_assert!(a >= b - 1e-12 && a >= e - 1e-12);
        }
    }

    #[test]
    fn reported_values_reconstruct(loss in 0.0f64..1.0, gamma in 0.01f64..0.45, k in 0.5f64..500.0, dkl in 0.0f64..50.0, m in 20usize..50_000) {
        for r in [
            thm1_from_loss(loss, dkl, k, gamma, m, 0.05),
            thm2_from_loss(loss, dkl, k, gamma, m, 0.05),
            bgplus_from_loss(loss, 10, gamma, m, 0.05),
            bg_original_from_loss(loss, 10, gamma, m, 0.05),
            fo_from_loss(loss, dkl, m, 0.05),
            f2_from_loss(loss, dkl, k, m, 0.05),
        ] {
            prop_assert!((r.value - r.reconstruct()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&r.value));
        }
    }
}
