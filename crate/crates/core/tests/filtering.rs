mod common;

use proptest::prelude::*;
use stacklq_core::equilibrium::mean_se;
use stacklq_core::filtering::{
    filter_agreement, nested_conditional_mc, simulate_cid_closed_loop, simulate_closed_loop, summarize, tower_check,
    tower_check_streaming, ClosedLoop,
};
use stacklq_core::riccati::{solve_cid_follower, solve_cid_leader_system, LeaderSystemCid};
use stacklq_core::{CidGame, CidSpec, InfoPattern, MatPath, Observed, TimeGrid};

fn solve(spec: &CidSpec, n_steps: usize) -> (MatPath, LeaderSystemCid) {
    let grid = TimeGrid::new(1.0, n_steps).unwrap();
    let p = solve_cid_follower(spec, grid).unwrap();
    let l = solve_cid_leader_system(spec, &p, grid).unwrap();
    (p, l)
}

fn closed_loop(spec: &CidSpec, n_steps: usize) -> ClosedLoop {
    let (p, l) = solve(spec, n_steps);
    ClosedLoop::new(&CidGame::from(spec), &p, &l).unwrap()
}

fn noiseless() -> CidSpec {
    CidSpec {
        A1: 0.0,
        A2: 0.0,
        A3: 0.0,
        ..CidSpec::generic()
    }
}

fn uncontrolled(a0: f64, a: f64) -> CidSpec {
    CidSpec {
        A0: a0,
        A1: a,
        A2: a,
        A3: a,
        Q1: 0.0,
        G1: 0.0,
        Q2: 0.0,
        G2: 0.0,
        ..CidSpec::generic()
    }
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn zero_diffusion_blocks_coincide_bit_exactly() {
    let spec = noiseless();
    let (p, l) = solve(&spec, 100);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 8, 3).unwrap();
    for path in &ens.paths {
        for k in 0..=100 {
            assert_eq!(path.x[k], path.xhat[k], "node {k}");
            assert_eq!(path.x[k], path.xcheck[k], "node {k}");
            assert_eq!(path.x[k], path.xhatcheck[k], "node {k}");
        }
        assert_eq!(path.x, ens.paths[0].x);
    }
}

#[test]
fn zero_diffusion_tower_gaps_are_zero() {
    let cl = closed_loop(&noiseless(), 50);
    let ens = simulate_closed_loop(&cl, 200, 1).unwrap();
    let rep = tower_check(&ens);
    assert_eq!(rep.max_gap, [0.0; 3]);
    assert!(rep.flagged.is_empty());
    assert!(rep.pass);
}

#[test]
fn zero_diffusion_nested_estimate_is_the_path() {
    let cl = closed_loop(&noiseless(), 40);
    for which in [Observed::FOLLOWER, Observed::LEADER, Observed::COMMON, Observed::ALL] {
        let est = nested_conditional_mc(&cl, which, 3, 5, 11).unwrap();
        for (nest, x) in est.nested.iter().zip(&est.x) {
            for k in 0..=40 {
                assert!((&nest[k] - &x[k]).amax() <= 1e-12 * (1.0 + x[k].amax()));
            }
        }
    }
}

#[test]
fn node_zero_shared_by_all_blocks() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 50);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 32, 5).unwrap();
    for path in &ens.paths {
        assert_eq!(path.x[0][0], spec.x0);
        assert_eq!(path.x[0][1], 0.0);
        assert_eq!(path.x[0], path.xhat[0]);
        assert_eq!(path.x[0], path.xcheck[0]);
        assert_eq!(path.x[0], path.xhatcheck[0]);
    }
}

#[test]
fn uncontrolled_mean_matches_exponential() {
    let spec = uncontrolled(0.1, 0.2);
    let (p, l) = solve(&spec, 200);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 10_000, 17).unwrap();
    for path in &ens.paths {
        assert!(path.u1.iter().chain(&path.u2).all(|u| u[0] == 0.0));
    }
    let xt: Vec<f64> = ens.paths.iter().map(|p| p.x[200][0]).collect();
    let (mean, se) = mean_se(&xt);
    let exact = spec.x0 * (spec.A0 * 1.0f64).exp();
    assert!((mean - exact).abs() <= 3.0 * se, "mean {mean} exact {exact} se {se}");
}

#[test]
fn weak_order_of_uncontrolled_mean() {
    // Small diffusion keeps the Monte Carlo error well below the bias.
    let spec = CidSpec {
        x0: 1.0,
        ..uncontrolled(1.0, 0.05)
    };
    let exact = spec.A0.exp();
    let err = |n: usize| {
        let cl = closed_loop(&spec, n);
        let s = summarize(&cl, 20_000, 23);
        let se = s.se[n][0];
        let e = s.mean[n][0] - exact;
        assert!(se < 0.05 * e.abs(), "n {n}: se {se} err {e}");
        e
    };
    let (e10, e20) = (err(10), err(20));
    let ratio = e10 / e20;
    assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn generic_tower_has_no_flags() {
    let cl = closed_loop(&CidSpec::generic(), 100);
    let rep = tower_check_streaming(&cl, 10_000, 2026);
    assert!(rep.pass, "max gaps {:?}", rep.max_gap);
    assert!(rep.flagged.is_empty());
    assert!(rep.max_gap.iter().all(|g| *g <= 4.0));
}

#[test]
fn generic_common_filter_mean_matches_state_mean() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 100);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 10_000, 99).unwrap();
    for k in 0..=100 {
        let x: Vec<f64> = ens.paths.iter().map(|p| p.x[k][0]).collect();
        let y: Vec<f64> = ens.paths.iter().map(|p| p.xhatcheck[k][0]).collect();
        let (mx, sx) = mean_se(&x);
        let (my, sy) = mean_se(&y);
        assert!((mx - my).abs() <= 3.0 * (sx * sx + sy * sy).sqrt(), "node {k}");
    }
}

#[test]
fn frozen_filter_is_flagged() {
    let cl = closed_loop(&CidSpec::generic(), 50);
    let mut ens = simulate_closed_loop(&cl, 2_000, 8).unwrap();
    for path in &mut ens.paths {
        let x0 = path.xhat[0].clone();
        path.xhat.iter_mut().for_each(|v| *v = x0.clone());
    }
    let rep = tower_check(&ens);
    assert!(!rep.pass);
    assert!(rep.flagged.contains(&50));
    assert!(rep.gaps[50][0] > 4.0);
}

#[test]
fn increment_variance_close_to_step() {
    let cl = closed_loop(&CidSpec::generic(), 100);
    let ens = simulate_closed_loop(&cl, 200, 4).unwrap();
    let h = ens.grid.h();
    for i in 0..3 {
        let v: Vec<f64> = ens.paths.iter().flat_map(|p| p.dw.iter().map(move |d| d[i])).collect();
        assert!(v.len() >= 10_000);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((0.9 * h..=1.1 * h).contains(&var), "dW{} var {var}", i + 1);
    }
}

#[test]
fn regeneration_is_bit_exact_and_order_independent() {
    let cl = closed_loop(&CidSpec::generic(), 60);
    let a = simulate_closed_loop(&cl, 100, 42).unwrap();
    let b = simulate_closed_loop(&cl, 100, 42).unwrap();
    assert_eq!(a, b);
    let single = cl.record_path(42, 37).unwrap();
    assert_eq!(single, a.paths[37]);
    let longer = simulate_closed_loop(&cl, 150, 42).unwrap();
    assert_eq!(&longer.paths[..100], &a.paths[..]);
    let other = simulate_closed_loop(&cl, 100, 43).unwrap();
    assert_ne!(other.paths[0], a.paths[0]);
}

#[test]
fn streaming_tower_matches_stored_ensemble() {
    let cl = closed_loop(&CidSpec::generic(), 40);
    let ens = simulate_closed_loop(&cl, 300, 6).unwrap();
    let a = tower_check(&ens);
    let b = tower_check_streaming(&cl, 300, 6);
    for k in 0..=40 {
        for j in 0..3 {
            assert!((a.gaps[k][j] - b.gaps[k][j]).abs() <= 1e-9 * (1.0 + a.gaps[k][j]));
        }
    }
}

#[test]
fn summary_matches_stored_ensemble() {
    let cl = closed_loop(&CidSpec::generic(), 30);
    let ens = simulate_closed_loop(&cl, 500, 12).unwrap();
    let s = summarize(&cl, 500, 12);
    let x: Vec<f64> = ens.paths.iter().map(|p| p.x[30][0]).collect();
    let (m, se) = mean_se(&x);
    assert!((s.mean[30][0] - m).abs() <= 1e-12);
    assert!((s.se[30][0] - se).abs() <= 1e-12);
    // The p-component starts at zero on every path.
    assert_eq!(s.se[0][1], 0.0);
}

#[test]
fn finer_filter_explains_more_variance() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 100);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 5_000, 31).unwrap();
    let x: Vec<f64> = ens.paths.iter().map(|p| p.x[100][0]).collect();
    let xh: Vec<f64> = ens.paths.iter().map(|p| p.xhat[100][0]).collect();
    let xhc: Vec<f64> = ens.paths.iter().map(|p| p.xhatcheck[100][0]).collect();
    let (r1, r2) = (corr(&x, &xh), corr(&x, &xhc));
    let se = (1.0 - r2 * r2) / (ens.n_paths as f64).sqrt();
    assert!(r1 >= r2 - 2.0 * se, "corr(X, X̂) {r1} corr(X, X̂̌) {r2}");
}

#[test]
fn full_information_nested_estimate_is_the_state() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 50);
    let cl = ClosedLoop::with_info(&CidGame::from(&spec), &p, &l, InfoPattern::FULL).unwrap();
    let est = nested_conditional_mc(&cl, Observed::ALL, 10, 7, 3).unwrap();
    for (o, (nest, filt)) in est.nested.iter().zip(&est.filter).enumerate() {
        for k in 0..=50 {
            assert!((&nest[k] - &est.x[o][k]).amax() <= 1e-12 * (1.0 + est.x[o][k].amax()));
            assert_eq!(filt[k], est.x[o][k]);
        }
    }
    let agree = filter_agreement(&est, 0);
    assert!(agree.rmse <= 1e-12);
}

#[test]
fn nested_rejects_unmatched_conditioning() {
    let cl = closed_loop(&CidSpec::generic(), 10);
    assert!(nested_conditional_mc(&cl, Observed([true, false, false]), 2, 2, 0).is_err());
}

#[test]
fn leader_filter_agrees_with_nested_oracle_small() {
    let cl = closed_loop(&CidSpec::generic(), 50);
    let est = nested_conditional_mc(&cl, Observed::LEADER, 40, 400, 77).unwrap();
    let agree = filter_agreement(&est, 0);
    assert!(agree.rmse <= 0.1 * agree.sd_terminal, "{agree:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_specs_share_node_zero_and_replay(seed in 0u64..1000) {
        let spec = common::random_cid(&mut common::rng(seed));
        let cl = closed_loop(&spec, 20);
        let a = simulate_closed_loop(&cl, 4, seed).unwrap();
        let b = simulate_closed_loop(&cl, 4, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for path in &a.paths {
            prop_assert_eq!(path.x[0][0], spec.x0);
            prop_assert_eq!(&path.x[0], &path.xhat[0]);
            prop_assert_eq!(&path.x[0], &path.xcheck[0]);
            prop_assert_eq!(&path.x[0], &path.xhatcheck[0]);
        }
    }
}
