use proptest::prelude::*;
use stacklq_core::equilibrium::{mean_se, stationarity_test_game, Direction, Player};
use stacklq_core::filtering::{simulate_closed_loop, tower_check_streaming};
use stacklq_core::linalg::{zeros, Mat};
use stacklq_core::principal_agent::{
    build_pa_game, pa_closed_loop, pa_consistency, preferences_of, preferences_streaming, simulate_pa, solve_pa,
    PaField, PaParams, PaSolution,
};
use stacklq_core::riccati::{block_residuals, residual_bound};
use stacklq_core::{Error, MatPath, TimeGrid};

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

fn quiet() -> PaParams {
    PaParams {
        sigma: [0.0; 3],
        sigma_bar: [0.0; 3],
        ..PaParams::generic()
    }
}

fn all_paths(sol: &PaSolution) -> Vec<MatPath> {
    let mut v = vec![sol.p.clone()];
    v.extend(sol.pcal.iter().cloned());
    v
}

#[test]
fn calligraphic_blocks() {
    let params = PaParams {
        B: 0.0,
        r: 0.0,
        ..PaParams::generic()
    };
    let game = build_pa_game(&params);
    let k = game.k();
    assert_eq!(k, Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]));
    let p = Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.7]);
    let b = game.blocks(&p);
    // r = 0: only the −P coupling survives in the lower-right block of 𝒜₀.
    let kp = &k * &p;
    assert_eq!(b.a0.view((0, 0), (2, 2)).into_owned(), zeros(2, 2));
    assert_eq!(b.a0.view((2, 2), (2, 2)).into_owned(), kp);
    assert_eq!(b.a0.view((0, 2), (2, 2)).into_owned(), zeros(2, 2));
}

#[test]
fn sign_identity() {
    let game = build_pa_game(&PaParams::generic());
    let a2 = &game.alpha[1];
    let a3 = &game.alpha[2];
    let d = a3 * a3.transpose() - a2 * a2.transpose();
    assert_eq!(d, Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -1.0]));
    let b = game.blocks(&Mat::identity(2, 2));
    assert_eq!(b.delta().view((0, 0), (2, 2)).into_owned(), d);
}

#[test]
fn agent_riccati_without_effort_or_interest() {
    let params = PaParams {
        B: 0.0,
        r: 0.0,
        ..PaParams::generic()
    };
    let sol = solve_pa(&params, grid(200)).unwrap();
    for m in &sol.p.values {
        assert!((m[(1, 1)] - 1.0).abs() <= 1e-12);
        assert!(m[(0, 0)].abs() <= 1e-12 && m[(0, 1)].abs() <= 1e-12 && m[(1, 0)].abs() <= 1e-12);
    }
}

#[test]
fn terminal_conditions_and_gains() {
    let sol = solve_pa(&PaParams::generic(), grid(100)).unwrap();
    assert_eq!(sol.p.at(100), &Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    let mut g2 = zeros(4, 4);
    g2[(0, 0)] = 1.0;
    assert_eq!(sol.pcal[0].at(100), &g2);
    for i in 1..4 {
        assert_eq!(sol.pcal[i].at(100), &zeros(4, 4));
    }
    // s* on y̌ at T: −α̃₂ᵀ𝒢₂ picks +1 from the top-left entry.
    let s_check = sol.gains.principal_check.at(100);
    assert_eq!(
        s_check.row(0).iter().copied().collect::<Vec<_>>(),
        vec![1.0, 0.0, 0.0, 0.0]
    );
    // d* on y̌ at T: α̃₃ᵀ𝒢₂.
    assert_eq!(
        s_check.row(1).iter().copied().collect::<Vec<_>>(),
        vec![-1.0, 0.0, 0.0, 0.0]
    );
    // s* on the p̃-slot of X̂̌ at T: −(P(T)α₂)ᵀ.
    let s_cross = sol.gains.principal_cross.at(100);
    assert_eq!(
        s_cross.row(0).iter().copied().collect::<Vec<_>>(),
        vec![0.0, 0.0, 0.0, -1.0]
    );
    assert_eq!(sol.gains.agent_cross.at(100), &zeros(2, 4));
}

#[test]
fn matches_generic_machinery() {
    let params = PaParams::generic();
    let sol = solve_pa(&params, grid(200)).unwrap();
    let c = pa_consistency(&params, &sol).unwrap();
    assert!(c.max() <= 1e-8, "{c:?}");
}

#[test]
fn residuals_small_on_fine_grid() {
    let params = PaParams::generic();
    let game = build_pa_game(&params);
    let field = PaField { game: &game };
    let sol = solve_pa(&params, grid(4000)).unwrap();
    let res = block_residuals(&all_paths(&sol), &field);
    assert_eq!(res.len(), 5);
    assert!(res.iter().all(|r| *r <= 1e-6), "{res:?}");
}

#[test]
fn residuals_within_bound() {
    let params = PaParams::generic();
    let game = build_pa_game(&params);
    let field = PaField { game: &game };
    let sol = solve_pa(&params, grid(200)).unwrap();
    let paths = all_paths(&sol);
    for (r, p) in block_residuals(&paths, &field).iter().zip(&paths) {
        assert!(*r <= residual_bound(p), "{r} vs {}", residual_bound(p));
    }
}

#[test]
fn invalid_params_rejected() {
    let bad = PaParams {
        T: 0.0,
        ..PaParams::generic()
    };
    assert!(matches!(solve_pa(&bad, grid(10)), Err(Error::Invalid(_))));
    let bad = PaParams {
        r: f64::NAN,
        ..PaParams::generic()
    };
    assert!(matches!(solve_pa(&bad, grid(10)), Err(Error::Invalid(_))));
}

#[test]
fn noiseless_contract_is_deterministic() {
    let params = quiet();
    let sol = solve_pa(&params, grid(100)).unwrap();
    let a = simulate_pa(&params, &sol, 4, 1).unwrap();
    let b = simulate_pa(&params, &sol, 4, 2).unwrap();
    for (pa, pb) in a.ensemble.paths.iter().zip(&b.ensemble.paths) {
        assert_eq!(pa.x, pb.x);
        assert_eq!(pa.x, pa.xhat);
        assert_eq!(pa.x, pa.xcheck);
        assert_eq!(pa.x, pa.xhatcheck);
        assert_eq!(pa.u1, pb.u1);
        assert_eq!(pa.u2, pb.u2);
    }
    assert_eq!(a.preferences.j1.std_error, 0.0);
    assert_eq!(a.preferences.j1.mean, b.preferences.j1.mean);
}

#[test]
fn symmetric_noise_leaves_zero_mean() {
    let params = PaParams {
        B: 0.0,
        r: 0.0,
        y0: 0.0,
        m0: 0.0,
        ..PaParams::generic()
    };
    let sol = solve_pa(&params, grid(100)).unwrap();
    let sim = simulate_pa(&params, &sol, 10_000, 5).unwrap();
    let y: Vec<f64> = sim.ensemble.paths.iter().map(|p| p.x[100][0]).collect();
    let (mean, se) = mean_se(&y);
    assert!(mean.abs() <= 3.0 * se, "{mean} se {se}");
}

#[test]
fn streaming_preferences_match_stored() {
    let params = PaParams::generic();
    let sol = solve_pa(&params, grid(50)).unwrap();
    let cl = pa_closed_loop(&params, &sol).unwrap();
    let ens = simulate_closed_loop(&cl, 300, 8).unwrap();
    let a = preferences_of(&ens);
    let b = preferences_streaming(&cl, 300, 8);
    assert!((a.j1.mean - b.j1.mean).abs() <= 1e-12);
    assert!((a.j2.mean - b.j2.mean).abs() <= 1e-12);
    assert!((a.j1.std_error - b.j1.std_error).abs() <= 1e-12);
}

#[test]
fn generic_contract_passes_tower_and_stationarity() {
    let params = PaParams::generic();
    let sol = solve_pa(&params, grid(100)).unwrap();
    let cl = pa_closed_loop(&params, &sol).unwrap();
    let tower = tower_check_streaming(&cl, 10_000, 12);
    assert!(tower.pass, "{:?}", tower.max_gap);
    let eps = [-0.04, -0.02, 0.02, 0.04];
    let dirs = [
        Direction {
            player: Player::Leader,
            gain: Mat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        },
        Direction {
            player: Player::Follower,
            gain: Mat::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        },
    ];
    for dir in &dirs {
        let r = stationarity_test_game(&cl, dir, &eps, 20_000, 13).unwrap();
        assert!(r.fit.b.abs() <= 3.0 * r.fit.se_b, "{:?}: {:?}", dir.player, r.fit);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Inside T ≤ 1, |B| ≤ 1 the systems stay finite.
    #[test]
    fn safe_box_solves(
        t in 0.1f64..=1.0,
        b in -1.0f64..=1.0,
        r in -0.2f64..0.2,
        s in proptest::array::uniform3(0.0f64..0.5),
        sb in proptest::array::uniform3(0.0f64..0.5),
    ) {
        let params = PaParams { r, B: b, sigma: s, sigma_bar: sb, y0: 1.0, m0: 1.0, T: t };
        let sol = solve_pa(&params, TimeGrid::new(t, 100).unwrap()).unwrap();
        for path in std::iter::once(&sol.p).chain(sol.pcal.iter()) {
            prop_assert!(path.values.iter().all(|m| m.iter().all(|v| v.is_finite())));
        }
        prop_assert!(pa_consistency(&params, &sol).unwrap().max() <= 1e-8);
    }
}
