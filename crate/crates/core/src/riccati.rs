//! Backward RK4 integration of the Riccati systems.

use crate::assembly::{
    compute_sigma_chain, drift_and_driver, riccati_level_rhs, CidBlocks, CidSlots, FollowerCoeffs, LeaderBlocks, Level,
    SigmaSet,
};
use crate::error::{Error, Result};
use crate::game_model::{validate_spec, CidGame, CidSpec, GameSpec, MatPath, TimeGrid};
use crate::linalg::{blkdiag, max_abs, min_abs_eig_sym, norm_inf, zeros, Mat};

/// Entries beyond this magnitude are treated as blow-up.
pub const BLOWUP: f64 = 1e12;

/// Right-hand side of a backward matrix ODE system Ṗ = F(t, P) with P(T) given.
pub trait RiccatiField: Sync {
    fn terminal(&self) -> Vec<Mat>;
    /// Labels of the state blocks, used in error reports.
    fn names(&self) -> Vec<String>;
    /// `node` is the grid node at which the current step starts.
    fn eval(&self, t: f64, node: usize, state: &[Mat]) -> Result<Vec<Mat>>;
}

/// Single-block field given by a closure.
pub struct FnField<G> {
    pub terminal: Mat,
    pub f: G,
}

impl<G: Fn(f64, &Mat) -> Mat + Sync> RiccatiField for FnField<G> {
    fn terminal(&self) -> Vec<Mat> {
        vec![self.terminal.clone()]
    }

    fn names(&self) -> Vec<String> {
        vec!["P".into()]
    }

    fn eval(&self, t: f64, _node: usize, state: &[Mat]) -> Result<Vec<Mat>> {
        Ok(vec![(self.f)(t, &state[0])])
    }
}

fn check_blocks(t: f64, names: &[String], blocks: &[Mat]) -> Result<()> {
    for (name, m) in names.iter().zip(blocks) {
        if m.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::NonFinite { t, which: name.clone() });
        }
    }
    Ok(())
}

fn axpy(y: &[Mat], a: f64, k: &[Mat]) -> Vec<Mat> {
    y.iter().zip(k).map(|(y, k)| y + k * a).collect()
}

/// Classical RK4 from T down to 0. Returns one path per state block; the
/// value at node `n_steps` is the terminal condition, bit for bit.
pub fn integrate_blocks(field: &dyn RiccatiField, grid: TimeGrid) -> Result<Vec<MatPath>> {
    let names = field.names();
    let n = grid.n_steps;
    let h = grid.h();
    let mut y = field.terminal();
    check_blocks(grid.horizon, &names, &y)?;
    let mut out: Vec<Vec<Mat>> = vec![Vec::with_capacity(n + 1); y.len()];
    let mut rev: Vec<Vec<Mat>> = vec![Vec::new(); y.len()];
    for (b, m) in y.iter().enumerate() {
        rev[b].push(m.clone());
    }
    for k in (0..n).rev() {
        let t = grid.t(k + 1);
        let tm = t - 0.5 * h;
        let k1 = field.eval(t, k + 1, &y)?;
        check_blocks(t, &names, &k1)?;
        let k2 = field.eval(tm, k + 1, &axpy(&y, -0.5 * h, &k1))?;
        check_blocks(tm, &names, &k2)?;
        let k3 = field.eval(tm, k + 1, &axpy(&y, -0.5 * h, &k2))?;
        check_blocks(tm, &names, &k3)?;
        let k4 = field.eval(grid.t(k), k + 1, &axpy(&y, -h, &k3))?;
        check_blocks(grid.t(k), &names, &k4)?;
        y = y
            .iter()
            .enumerate()
            .map(|(b, yb)| yb - (&k1[b] + &k2[b] * 2.0 + &k3[b] * 2.0 + &k4[b]) * (h / 6.0))
            .collect();
        check_blocks(grid.t(k), &names, &y)?;
        for (b, m) in y.iter().enumerate() {
            rev[b].push(m.clone());
        }
    }
    for (b, r) in rev.into_iter().enumerate() {
        out[b] = r.into_iter().rev().collect();
    }
    Ok(out.into_iter().map(|v| MatPath::new(grid, v)).collect())
}

/// Single-block convenience wrapper over [`integrate_blocks`].
pub fn integrate_backward(field: &dyn RiccatiField, grid: TimeGrid) -> Result<MatPath> {
    Ok(integrate_blocks(field, grid)?.swap_remove(0))
}

/// Per-block defects max_k ‖(P_{k+1} − P_{k−1})/2h − F(t_k, P_k)‖_∞ over interior nodes.
/// A field evaluation failure yields an infinite defect.
pub fn block_residuals(paths: &[MatPath], field: &dyn RiccatiField) -> Vec<f64> {
    let grid = paths[0].grid;
    let h = grid.h();
    let mut res = vec![0.0f64; paths.len()];
    for k in 1..grid.n_steps {
        let state: Vec<Mat> = paths.iter().map(|p| p.at(k).clone()).collect();
        match field.eval(grid.t(k), k, &state) {
            Ok(f) => {
                for (b, p) in paths.iter().enumerate() {
                    let cd = (p.at(k + 1) - p.at(k - 1)) / (2.0 * h);
                    res[b] = res[b].max(norm_inf(&(cd - &f[b])));
                }
            }
            Err(_) => res.iter_mut().for_each(|r| *r = f64::INFINITY),
        }
    }
    res
}

/// Defect of a single-block path.
pub fn riccati_residual(path: &MatPath, field: &dyn RiccatiField) -> f64 {
    block_residuals(std::slice::from_ref(path), field)[0]
}

/// The acceptance bound 10·h²·(1 + max_k ‖P_k‖_∞)² for a path, in the same
/// norm as the residual.
pub fn residual_bound(path: &MatPath) -> f64 {
    let h = path.grid.h();
    let norm = path.values.iter().map(norm_inf).fold(0.0, f64::max);
    10.0 * h * h * (1.0 + norm).powi(2)
}

// ---------------------------------------------------------------------------
// Follower

/// Ṗ₁ = −(P₁A₀ + A₀ᵀP₁ + ΣAᵢᵀP₁Aᵢ + Q₁ − S₁N̄₁⁻¹S₁ᵀ).
pub struct FollowerField<'a> {
    pub spec: &'a GameSpec,
}

pub fn follower_rhs(spec: &GameSpec, p: &Mat, t: f64, node: usize) -> Result<Mat> {
    let fc = FollowerCoeffs::new(spec, p, t, node)?;
    let a = &spec.a;
    let mut acc = p * &a[0] + a[0].transpose() * p + &spec.q1;
    for ai in &a[1..] {
        acc += ai.transpose() * p * ai;
    }
    let corr = crate::linalg::lu_solve(&fc.nbar1, &fc.s1.transpose()).ok_or(Error::AssumptionViolated {
        t,
        node,
        which: crate::error::Assumption::A21,
    })?;
    acc -= &fc.s1 * corr;
    Ok(-acc)
}

impl RiccatiField for FollowerField<'_> {
    fn terminal(&self) -> Vec<Mat> {
        vec![self.spec.g1.clone()]
    }

    fn names(&self) -> Vec<String> {
        vec!["P".into()]
    }

    fn eval(&self, t: f64, node: usize, state: &[Mat]) -> Result<Vec<Mat>> {
        Ok(vec![follower_rhs(self.spec, &state[0], t, node)?])
    }
}

fn check_nbar(spec: &GameSpec, p: &MatPath) -> Result<()> {
    for (k, pk) in p.values.iter().enumerate() {
        let fc = FollowerCoeffs::new(spec, pk, p.grid.t(k), k)?;
        if min_abs_eig_sym(&fc.nbar1) < crate::game_model::DEF_TOL {
            return Err(Error::AssumptionViolated {
                t: p.grid.t(k),
                node: k,
                which: crate::error::Assumption::A21,
            });
        }
    }
    Ok(())
}

/// Follower solution without the definiteness checks on N₁ (indefinite
/// weights are allowed in the control-independent case).
pub fn solve_follower_unchecked(spec: &GameSpec, grid: TimeGrid) -> Result<MatPath> {
    let p = integrate_backward(&FollowerField { spec }, grid)?;
    check_nbar(spec, &p)?;
    Ok(p)
}

pub fn solve_follower_riccati(spec: &GameSpec, grid: TimeGrid) -> Result<MatPath> {
    validate_spec(spec).into_result()?;
    solve_follower_unchecked(spec, grid)
}

// ---------------------------------------------------------------------------
// Control-independent leader system

/// 𝒫₁…𝒫₄ on the grid.
#[derive(Debug, Clone)]
pub struct LeaderSystemCid {
    pub grid: TimeGrid,
    pub p: [MatPath; 4],
}

impl LeaderSystemCid {
    pub fn at(&self, k: usize) -> Level {
        std::array::from_fn(|i| self.p[i].at(k).clone())
    }
}

/// Joint field for (P, 𝒫₁, 𝒫₂, 𝒫₃, 𝒫₄). Each block only reads blocks
/// before it, so the joint integration is the sequential one.
pub struct CidLeaderField<'a> {
    pub game: &'a CidGame,
    pub spec: GameSpec,
}

impl<'a> CidLeaderField<'a> {
    pub fn new(game: &'a CidGame) -> Self {
        Self {
            game,
            spec: game.to_game_spec(),
        }
    }
}

impl RiccatiField for CidLeaderField<'_> {
    fn terminal(&self) -> Vec<Mat> {
        let d = 2 * self.game.n;
        let z = zeros(self.game.n, self.game.n);
        vec![
            self.game.g1.clone(),
            blkdiag(&self.game.g2, &z),
            zeros(d, d),
            zeros(d, d),
            zeros(d, d),
        ]
    }

    fn names(&self) -> Vec<String> {
        ["P", "P1", "P2", "P3", "P4"].iter().map(|s| s.to_string()).collect()
    }

    fn eval(&self, t: f64, node: usize, s: &[Mat]) -> Result<Vec<Mat>> {
        let dp = follower_rhs(&self.spec, &s[0], t, node)?;
        let blocks = CidBlocks::new(self.game, &s[0])?;
        let lv: Level = [s[1].clone(), s[2].clone(), s[3].clone(), s[4].clone()];
        let [a, b, c, d] = CidSlots::new(&blocks, &lv).rhs(&lv);
        Ok(vec![dp, a, b, c, d])
    }
}

/// Solves P and 𝒫₁…𝒫₄ for a control-independent game. `p` must be the
/// follower solution on the same grid.
pub fn solve_cid_game_leader(game: &CidGame, p: &MatPath, grid: TimeGrid) -> Result<LeaderSystemCid> {
    game.validate().into_result()?;
    if p.grid != grid {
        return Err(Error::Invalid("follower path is on a different grid".into()));
    }
    let field = CidLeaderField::new(game);
    let mut paths = integrate_blocks(&field, grid)?;
    if paths[0].values != p.values {
        return Err(Error::Invalid(
            "follower path does not solve this game's Riccati equation".into(),
        ));
    }
    let p4 = paths.pop().unwrap();
    let p3 = paths.pop().unwrap();
    let p2 = paths.pop().unwrap();
    let p1 = paths.pop().unwrap();
    Ok(LeaderSystemCid {
        grid,
        p: [p1, p2, p3, p4],
    })
}

/// Follower solution of a control-independent game.
pub fn solve_cid_game_follower(game: &CidGame, grid: TimeGrid) -> Result<MatPath> {
    game.validate().into_result()?;
    solve_follower_unchecked(&game.to_game_spec(), grid)
}

pub fn solve_cid_leader_system(spec: &CidSpec, p: &MatPath, grid: TimeGrid) -> Result<LeaderSystemCid> {
    solve_cid_game_leader(&CidGame::from(spec), p, grid)
}

/// Scalar follower solution P(t).
pub fn solve_cid_follower(spec: &CidSpec, grid: TimeGrid) -> Result<MatPath> {
    spec.validate().into_result()?;
    solve_cid_game_follower(&CidGame::from(spec), grid)
}

// ---------------------------------------------------------------------------
// General coupled system

/// Joint field for (P₁, 𝒫₁, 𝒫₂, 𝒫₃, 𝒫₄) with the Σ-chain recomputed at
/// every evaluation.
pub struct GeneralLeaderField<'a> {
    pub spec: &'a GameSpec,
}

impl GeneralLeaderField<'_> {
    pub fn blocks_and_sigma(&self, t: f64, node: usize, s: &[Mat]) -> Result<(LeaderBlocks, SigmaSet)> {
        let blocks = LeaderBlocks::new(self.spec, &s[0], t, node)?;
        let lv: Level = [s[1].clone(), s[2].clone(), s[3].clone(), s[4].clone()];
        let sig = compute_sigma_chain(&blocks, &lv, t, node)?;
        Ok((blocks, sig))
    }
}

impl RiccatiField for GeneralLeaderField<'_> {
    fn terminal(&self) -> Vec<Mat> {
        let n = self.spec.n;
        let d = 2 * n;
        vec![
            self.spec.g1.clone(),
            blkdiag(&self.spec.g2, &zeros(n, n)),
            zeros(d, d),
            zeros(d, d),
            zeros(d, d),
        ]
    }

    fn names(&self) -> Vec<String> {
        ["P", "P1", "P2", "P3", "P4"].iter().map(|s| s.to_string()).collect()
    }

    fn eval(&self, t: f64, node: usize, s: &[Mat]) -> Result<Vec<Mat>> {
        let (blocks, sig) = self.blocks_and_sigma(t, node, s)?;
        let lv: Level = [s[1].clone(), s[2].clone(), s[3].clone(), s[4].clone()];
        let (r, f) = drift_and_driver(&blocks, &lv, &sig);
        let [a, b, c, d] = riccati_level_rhs(&lv, &r, &f);
        let dp = follower_rhs(self.spec, &s[0], t, node)?;
        Ok(vec![dp, a, b, c, d])
    }
}

/// Successful integration of the general coupled system.
#[derive(Debug, Clone)]
pub struct GeneralLeaderSolution {
    pub follower: MatPath,
    pub p: [MatPath; 4],
    /// Step-matrix condition numbers per node.
    pub cond: Vec<[f64; 4]>,
    pub sigma: Vec<SigmaSet>,
}

pub fn attempt_general_leader_system(spec: &GameSpec, grid: TimeGrid) -> Result<GeneralLeaderSolution> {
    validate_spec(spec).into_result()?;
    let field = GeneralLeaderField { spec };
    let mut paths = integrate_blocks(&field, grid)?;
    let mut cond = Vec::with_capacity(grid.n_steps + 1);
    let mut sigma = Vec::with_capacity(grid.n_steps + 1);
    for k in 0..=grid.n_steps {
        let s: Vec<Mat> = paths.iter().map(|p| p.at(k).clone()).collect();
        let (_, sig) = field.blocks_and_sigma(grid.t(k), k, &s)?;
        cond.push(sig.cond);
        sigma.push(sig);
    }
    let p4 = paths.pop().unwrap();
    let p3 = paths.pop().unwrap();
    let p2 = paths.pop().unwrap();
    let p1 = paths.pop().unwrap();
    let follower = paths.pop().unwrap();
    Ok(GeneralLeaderSolution {
        follower,
        p: [p1, p2, p3, p4],
        cond,
        sigma,
    })
}

/// Largest entry of a matrix path difference, used by cross-solver checks.
pub fn max_path_diff(a: &MatPath, b: &MatPath) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| max_abs(&(x - y)))
        .fold(0.0, f64::max)
}
