mod common;

use proptest::prelude::*;
use stacklq_core::equilibrium::{
    adjoint_check, build_strategies_cid, evaluate_cost, reconstruct_adjoint, stationarity_test, stationarity_test_game,
    Direction, Player,
};
use stacklq_core::filtering::{simulate_cid_closed_loop, simulate_closed_loop, ClosedLoop};
use stacklq_core::linalg::{zeros, Mat};
use stacklq_core::riccati::{solve_cid_follower, solve_cid_leader_system, LeaderSystemCid};
use stacklq_core::{CidGame, CidSpec, Error, MatPath, TimeGrid};

const EPS: [f64; 4] = [-0.04, -0.02, 0.02, 0.04];

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

fn direction(player: Player, g: [f64; 2]) -> Direction {
    Direction {
        player,
        gain: Mat::from_row_slice(1, 2, &g),
    }
}

#[test]
fn leader_cross_gain_at_terminal_time() {
    let spec = CidSpec {
        G1: 1.7,
        N2: 1.3,
        C0: 0.8,
        ..CidSpec::generic()
    };
    let (p, l) = solve(&spec, 100);
    let s = build_strategies_cid(&spec, &p, &l).unwrap();
    let cross = s.leader_gain_cross.at(100);
    assert!(cross[(0, 0)].abs() <= 1e-14);
    assert!((cross[(0, 1)] + spec.C0 * spec.G1 / spec.N2).abs() <= 1e-12);
    // 𝒫₃(T) = 𝒫₄(T) = 0 leaves no follower cross-gain at T.
    assert!(s.follower_gain_cross.at(100).amax() <= 1e-14);
}

#[test]
fn zero_follower_weights_reduce_follower_gain() {
    let spec = CidSpec {
        Q1: 0.0,
        G1: 0.0,
        ..CidSpec::generic()
    };
    let (p, l) = solve(&spec, 80);
    assert!(p.values.iter().all(|m| m.amax() == 0.0));
    let s = build_strategies_cid(&spec, &p, &l).unwrap();
    for k in 0..=80 {
        let lv = l.at(k);
        let sum = &lv[0] + &lv[1];
        let expect = Mat::from_row_slice(1, 2, &[sum[(1, 0)], sum[(1, 1)]]) * (-spec.B0 / spec.N1);
        assert!((s.follower_gain_hat.at(k) - expect).amax() <= 1e-14);
    }
}

#[test]
fn zero_leader_weights_give_zero_leader_control() {
    let spec = CidSpec {
        Q2: 0.0,
        G2: 0.0,
        ..CidSpec::generic()
    };
    let (p, l) = solve(&spec, 100);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 200, 9).unwrap();
    for path in &ens.paths {
        assert!(path.u2.iter().all(|u| u[0] == 0.0));
        assert!(path.xhatcheck.iter().all(|v| v[1] == 0.0));
    }
}

#[test]
fn gains_finite_on_grid() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 200);
    let s = build_strategies_cid(&spec, &p, &l).unwrap();
    for path in [
        &s.follower_gain_hat,
        &s.follower_gain_cross,
        &s.leader_gain_check,
        &s.leader_gain_cross,
    ] {
        assert!(path.values.iter().all(|m| m.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn zero_weights_cost_nothing() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 50);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 100, 1).unwrap();
    let zero = CidSpec {
        Q1: 0.0,
        N1: 0.0,
        G1: 0.0,
        Q2: 0.0,
        N2: 0.0,
        G2: 0.0,
        ..spec
    };
    for who in [Player::Follower, Player::Leader] {
        let c = evaluate_cost(&ens, who, &zero);
        assert_eq!(c.mean, 0.0);
        assert_eq!(c.std_error, 0.0);
        assert_eq!(c.n_paths, 100);
    }
}

#[test]
fn running_cost_quadrature() {
    let spec = CidSpec {
        A0: 0.0,
        A1: 0.0,
        A2: 0.0,
        A3: 0.0,
        B0: 0.0,
        C0: 0.0,
        Q1: 1.0,
        G1: 0.0,
        x0: 1.0,
        ..CidSpec::generic()
    };
    let (p, l) = solve(&spec, 100);
    let ens = simulate_cid_closed_loop(&spec, &p, &l, 10, 2).unwrap();
    assert!(ens.paths.iter().all(|p| p.u1.iter().chain(&p.u2).all(|u| u[0] == 0.0)));
    let c = evaluate_cost(&ens, Player::Follower, &spec);
    assert!((c.mean - 0.5).abs() <= 1e-4);
    assert_eq!(c.std_error, 0.0);
}

#[test]
fn cost_is_deterministic() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 60);
    let a = simulate_cid_closed_loop(&spec, &p, &l, 300, 77).unwrap();
    let b = simulate_cid_closed_loop(&spec, &p, &l, 300, 77).unwrap();
    for who in [Player::Follower, Player::Leader] {
        assert_eq!(evaluate_cost(&a, who, &spec), evaluate_cost(&b, who, &spec));
    }
}

#[test]
fn zero_direction_is_degenerate() {
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 40);
    for who in [Player::Leader, Player::Follower] {
        let r = stationarity_test(&spec, &p, &l, &direction(who, [0.0, 0.0]), &EPS, 200, 3);
        assert_eq!(r.unwrap_err(), Error::DegenerateFit);
    }
}

#[test]
fn direction_shape_is_checked() {
    let cl = closed_loop(&CidSpec::generic(), 20);
    let dir = Direction {
        player: Player::Leader,
        gain: zeros(1, 3),
    };
    assert!(matches!(
        stationarity_test_game(&cl, &dir, &EPS, 10, 0),
        Err(Error::Invalid(_))
    ));
    let few = [-0.1, 0.1];
    let dir = direction(Player::Leader, [1.0, 0.0]);
    assert!(matches!(
        stationarity_test_game(&cl, &dir, &few, 10, 0),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn zero_leader_weights_give_pure_quadratic() {
    let spec = CidSpec {
        Q2: 0.0,
        G2: 0.0,
        ..CidSpec::generic()
    };
    let (p, l) = solve(&spec, 50);
    let r = stationarity_test(&spec, &p, &l, &direction(Player::Leader, [1.0, 0.0]), &EPS, 500, 4).unwrap();
    assert_eq!(r.fit.b, 0.0);
    assert!(r.fit.a > 0.0);
    assert!(r.pass);
}

#[test]
fn generic_equilibrium_is_stationary() {
    let cl = closed_loop(&CidSpec::generic(), 100);
    for who in [Player::Leader, Player::Follower] {
        let r = stationarity_test_game(&cl, &direction(who, [1.0, 0.0]), &EPS, 20_000, 5).unwrap();
        assert!(r.fit.b.abs() <= 3.0 * r.fit.se_b, "{who:?}: {:?}", r.fit);
        assert!(r.fit.a > 0.0, "{who:?}: {:?}", r.fit);
        assert!(r.pass);
        // J(ε) + J(−ε) − 2J(0) ≥ −3·SE.
        assert!(r.convexity_margin.unwrap() >= -3.0);
    }
}

#[test]
fn suboptimal_strategy_is_not_stationary() {
    // The equilibrium of one game tested against the costs of another.
    let spec = CidSpec::generic();
    let other = CidSpec { N2: 3.0, ..spec };
    let (p, l) = solve(&other, 100);
    let cl = ClosedLoop::new(&CidGame::from(&spec), &p, &l).unwrap();
    let r = stationarity_test_game(&cl, &direction(Player::Leader, [1.0, 0.0]), &EPS, 20_000, 6).unwrap();
    assert!(r.fit.b.abs() > 3.0 * r.fit.se_b, "{:?}", r.fit);
    assert!(!r.pass);
}

#[test]
fn perturbation_fit_matches_direct_simulation() {
    // Follower deviation u₁* + ε·g·X̂* against the leader's recorded control
    // process, re-simulated by plain Euler on the physical state.
    let spec = CidSpec::generic();
    let (p, l) = solve(&spec, 50);
    let cl = ClosedLoop::new(&CidGame::from(&spec), &p, &l).unwrap();
    let (eps, g) = (0.3, [1.0, -0.5]);
    let r = stationarity_test_game(&cl, &direction(Player::Follower, g), &[-eps, 0.0, eps], 400, 10).unwrap();
    let ens = simulate_closed_loop(&cl, 400, 10).unwrap();
    let h = ens.grid.h();
    let costs: Vec<f64> = ens
        .paths
        .iter()
        .map(|path| {
            let mut x = spec.x0;
            let mut j = 0.0;
            for k in 0..=50 {
                let u1 = path.u1[k][0] + eps * (g[0] * path.xhat[k][0] + g[1] * path.xhat[k][1]);
                let w = if k == 0 || k == 50 { 0.5 } else { 1.0 };
                j += 0.5 * w * h * (spec.Q1 * x * x + spec.N1 * u1 * u1);
                if k == 50 {
                    j += 0.5 * spec.G1 * x * x;
                    break;
                }
                let dw = path.dw[k];
                x += h * (spec.A0 * x + spec.B0 * u1 + spec.C0 * path.u2[k][0])
                    + x * (spec.A1 * dw[0] + spec.A2 * dw[1] + spec.A3 * dw[2]);
            }
            j
        })
        .collect();
    let direct = costs.iter().sum::<f64>() / costs.len() as f64;
    assert!(
        (direct - r.j_means[2]).abs() <= 1e-10 * direct,
        "{direct} vs {}",
        r.j_means[2]
    );
}

#[test]
fn zero_leader_system_gives_zero_adjoint() {
    let spec = CidSpec {
        Q1: 0.0,
        G1: 0.0,
        Q2: 0.0,
        G2: 0.0,
        ..CidSpec::generic()
    };
    let cl = closed_loop(&spec, 30);
    let ens = simulate_closed_loop(&cl, 20, 1).unwrap();
    let adj = reconstruct_adjoint(&ens, &cl);
    for (y, z) in adj.y.iter().zip(&adj.z) {
        assert!(y.iter().flatten().all(|v| *v == 0.0));
        assert!(z.iter().flat_map(|zk| zk.iter().flatten()).all(|v| *v == 0.0));
    }
}

#[test]
fn adjoint_terminal_identity() {
    let spec = CidSpec::generic();
    let cl = closed_loop(&spec, 100);
    let ens = simulate_closed_loop(&cl, 500, 3).unwrap();
    let adj = reconstruct_adjoint(&ens, &cl);
    let g2 = &cl.blocks_t.g2;
    let mut worst = 0.0f64;
    for (path, y) in ens.paths.iter().zip(&adj.y) {
        let gx = g2 * &path.x[100];
        for c in 0..2 {
            worst = worst.max((y[100][c] - gx[c]).abs());
        }
    }
    assert!(worst <= 1e-8, "{worst}");
    assert!(adjoint_check(&cl, 500, 3).terminal_error <= 1e-8);
}

#[test]
fn adjoint_residual_mean_shrinks_with_step() {
    // The per-step mean of the Euler residual is O(h²), so its sum over the
    // grid is O(h).
    let spec = CidSpec::generic();
    let total = |n: usize| {
        let r = adjoint_check(&closed_loop(&spec, n), 2_000, 8);
        r.mean_abs.iter().sum::<f64>()
    };
    let (a, b) = (total(50), total(100));
    assert!(a / b > 1.5, "{a} vs {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn costs_finite_and_nonnegative(seed in 0u64..10_000) {
        let spec = common::random_cid(&mut common::rng(seed));
        let (p, l) = solve(&spec, 30);
        let ens = simulate_cid_closed_loop(&spec, &p, &l, 64, seed).unwrap();
        for who in [Player::Follower, Player::Leader] {
            let c = evaluate_cost(&ens, who, &spec);
            prop_assert!(c.mean.is_finite() && c.mean >= 0.0);
            prop_assert!(c.std_error.is_finite() && c.std_error >= 0.0);
        }
    }
}
