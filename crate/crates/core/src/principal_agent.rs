//! Principal–agent contract game: the agent (follower) picks effort e and
//! consumption c on (W₁, W₃); the principal (leader) picks payment s and
//! own consumption d on (W₂, W₃). State X = (y, m) of principal and agent
//! wealth.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{build_strategies_game, mean_se, CostEstimate, StrategyCid};
use crate::error::{Error, Result};
use crate::filtering::{par_chunks, simulate_closed_loop, ClosedLoop, PathEnsemble, CHUNK};
use crate::game_model::{CidGame, MatPath, TimeGrid, ValidationReport};
use crate::linalg::{blkdiag, hcat, zeros, Mat, Vector};
use crate::riccati::{
    integrate_blocks, max_path_diff, solve_cid_game_follower, solve_cid_game_leader, solve_follower_unchecked,
    LeaderSystemCid, RiccatiField,
};
use crate::rng;

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaParams {
    pub r: f64,
    pub B: f64,
    pub sigma: [f64; 3],
    pub sigma_bar: [f64; 3],
    pub y0: f64,
    pub m0: f64,
    pub T: f64,
}

impl PaParams {
    /// r = 0.05, B = 1, all volatilities 0.1, y₀ = m₀ = 1, T = 1.
    pub fn generic() -> Self {
        Self {
            r: 0.05,
            B: 1.0,
            sigma: [0.1; 3],
            sigma_bar: [0.1; 3],
            y0: 1.0,
            m0: 1.0,
            T: 1.0,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let all = [self.r, self.B, self.y0, self.m0, self.T]
            .into_iter()
            .chain(self.sigma)
            .chain(self.sigma_bar);
        if all.into_iter().any(|v| !v.is_finite()) {
            issues.push("non-finite coefficient".to_string());
        }
        if !(self.T > 0.0) {
            issues.push("horizon T must be positive".to_string());
        }
        ValidationReport { issues }
    }
}

fn col(v: &[f64]) -> Mat {
    Mat::from_column_slice(v.len(), 1, v)
}

/// Model data in the contract notation.
#[derive(Debug, Clone)]
pub struct PaGame {
    pub params: PaParams,
    /// r̃ = diag(r, r).
    pub r_tilde: Mat,
    /// B̃ = (B, 0)ᵀ.
    pub b_tilde: Mat,
    /// α₁, α₂, α₃ (2×1).
    pub alpha: [Mat; 3],
    /// σ̃ᵢ = (σᵢ, σ̄ᵢ)ᵀ.
    pub sigma_tilde: [Mat; 3],
    pub g1: Mat,
    pub g2: Mat,
    pub x0: Mat,
}

/// Time-dependent blocks of the principal's stacked system for a given
/// agent solution P.
#[derive(Debug, Clone)]
pub struct PaBlocks {
    pub a0: Mat,
    pub abar0: Mat,
    pub b0: Mat,
    /// α̃ᵢ = (αᵢ; 0), i = 2, 3.
    pub alpha2_tilde: Mat,
    pub alpha3_tilde: Mat,
    /// ᾱᵢ = (0; P αᵢ), i = 2, 3.
    pub alpha2_bar: Mat,
    pub alpha3_bar: Mat,
    /// Σᵢ = (σ̃ᵢ; 0).
    pub sigma: [Mat; 3],
    pub g2: Mat,
    pub x0: Mat,
}

impl PaBlocks {
    /// α̃₃α̃₃ᵀ − α̃₂α̃₂ᵀ.
    pub fn delta(&self) -> Mat {
        &self.alpha3_tilde * self.alpha3_tilde.transpose() - &self.alpha2_tilde * self.alpha2_tilde.transpose()
    }

    /// α̃₃ᾱ₃ᵀ − α̃₂ᾱ₂ᵀ.
    pub fn gamma(&self) -> Mat {
        &self.alpha3_tilde * self.alpha3_bar.transpose() - &self.alpha2_tilde * self.alpha2_bar.transpose()
    }

    /// ᾱ₃ᾱ₃ᵀ − ᾱ₂ᾱ₂ᵀ.
    pub fn psi(&self) -> Mat {
        &self.alpha3_bar * self.alpha3_bar.transpose() - &self.alpha2_bar * self.alpha2_bar.transpose()
    }
}

impl PaGame {
    /// B̃B̃ᵀ − α₁α₁ᵀ.
    pub fn k(&self) -> Mat {
        &self.b_tilde * self.b_tilde.transpose() - &self.alpha[0] * self.alpha[0].transpose()
    }

    pub fn blocks(&self, p: &Mat) -> PaBlocks {
        let z2 = zeros(2, 2);
        let z21 = zeros(2, 1);
        let k = self.k();
        let kp = &k * p;
        PaBlocks {
            a0: blkdiag(&self.r_tilde, &(&self.r_tilde + &kp)),
            abar0: blkdiag(&kp, &z2),
            b0: crate::linalg::block2(&z2, &k, &k, &z2),
            alpha2_tilde: vstack(&self.alpha[1], &z21),
            alpha3_tilde: vstack(&self.alpha[2], &z21),
            alpha2_bar: vstack(&z21, &(p * &self.alpha[1])),
            alpha3_bar: vstack(&z21, &(p * &self.alpha[2])),
            sigma: std::array::from_fn(|i| vstack(&self.sigma_tilde[i], &z21)),
            g2: blkdiag(&self.g2, &z2),
            x0: vstack(&self.x0, &z21),
        }
    }

    /// Agent Riccati right-hand side: Ṗ = −(P r̃ + r̃ᵀP + P K Pᵀ + G̃₁).
    pub fn agent_rhs(&self, p: &Mat) -> Mat {
        -(p * &self.r_tilde + self.r_tilde.transpose() * p + p * self.k() * p.transpose() + &self.g1)
    }

    /// The same game in the generic control-independent form, with
    /// u₁ = (e, c), u₂ = (s, d) and the weights implied by the equilibrium
    /// formulas: N₁ = diag(−1, 1), N₂ = diag(1, −1).
    pub fn to_cid_game(&self) -> CidGame {
        let z2 = zeros(2, 2);
        CidGame {
            n: 2,
            k1: 2,
            k2: 2,
            a: [self.r_tilde.clone(), z2.clone(), z2.clone(), z2.clone()],
            b0: hcat(&self.b_tilde, &self.alpha[0]),
            c0: hcat(&self.alpha[1], &self.alpha[2]),
            q1: self.g1.clone(),
            n1: Mat::from_diagonal(&Vector::from_vec(vec![-1.0, 1.0])),
            g1: self.g1.clone(),
            q2: self.g2.clone(),
            n2: Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1.0])),
            g2: self.g2.clone(),
            sigma: std::array::from_fn(|i| Vector::from_column_slice(self.sigma_tilde[i].as_slice())),
            x0: Vector::from_column_slice(self.x0.as_slice()),
        }
    }
}

fn vstack(a: &Mat, b: &Mat) -> Mat {
    let mut m = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    m
}

pub fn build_pa_game(params: &PaParams) -> PaGame {
    let p = params;
    PaGame {
        params: p.clone(),
        r_tilde: Mat::identity(2, 2) * p.r,
        b_tilde: col(&[p.B, 0.0]),
        alpha: [col(&[0.0, -1.0]), col(&[-1.0, 1.0]), col(&[-1.0, 0.0])],
        sigma_tilde: std::array::from_fn(|i| col(&[p.sigma[i], p.sigma_bar[i]])),
        g1: Mat::from_diagonal(&Vector::from_vec(vec![0.0, 1.0])),
        g2: Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.0])),
        x0: col(&[p.y0, p.m0]),
    }
}

/// Joint field for (P, 𝒫₁, 𝒫₂, 𝒫₃, 𝒫₄) in contract notation.
pub struct PaField<'a> {
    pub game: &'a PaGame,
}

impl PaField<'_> {
    /// (𝒫̇₁, …, 𝒫̇₄) given P.
    pub fn principal_rhs(&self, p: &Mat, s: &[Mat]) -> [Mat; 4] {
        let b = self.game.blocks(p);
        let (p1, p2, p3, p4) = (&s[0], &s[1], &s[2], &s[3]);
        let dl = b.delta();
        let gm = b.gamma();
        let ps = b.psi();
        let a0t = b.a0.transpose();
        let ab0t = b.abar0.transpose();
        let sum = p1 + p2 + p3 + p4;
        // Closed-loop drift on (𝒳, 𝒳̂, 𝒳̌, 𝒳̂̌).
        let r_f = &b.a0 + &b.b0 * p1;
        let r_h = &b.abar0 + &b.b0 * p2;
        let r_c = &b.b0 * p3 + &dl * (p1 + p3);
        let r_hc = &gm + &b.b0 * p4 + &dl * (p2 + p4);
        let dp1 = -(p1 * &b.a0 + &a0t * p1 + p1 * &b.b0 * p1 + &b.g2);
        let dp2 = -(p1 * &r_h + p2 * (&r_f + &r_h) + &a0t * p2 + &ab0t * (p1 + p2));
        let dp3 = -(p1 * &r_c + p3 * (&r_f + &r_c) + &a0t * p3);
        let r_sum = &r_f + &r_h + &r_c + &r_hc;
        let dp4 = -(p1 * &r_hc
            + p2 * (&r_c + &r_hc)
            + p3 * (&r_h + &r_hc)
            + p4 * &r_sum
            + &ps
            + &a0t * p4
            + &ab0t * (p3 + p4)
            + gm.transpose() * &sum);
        [dp1, dp2, dp3, dp4]
    }
}

impl RiccatiField for PaField<'_> {
    fn terminal(&self) -> Vec<Mat> {
        let z4 = zeros(4, 4);
        vec![
            self.game.g1.clone(),
            blkdiag(&self.game.g2, &zeros(2, 2)),
            z4.clone(),
            z4.clone(),
            z4,
        ]
    }

    fn names(&self) -> Vec<String> {
        ["P", "P1", "P2", "P3", "P4"].iter().map(|s| s.to_string()).collect()
    }

    fn eval(&self, _t: f64, _node: usize, s: &[Mat]) -> Result<Vec<Mat>> {
        let dp = self.game.agent_rhs(&s[0]);
        let [a, b, c, d] = self.principal_rhs(&s[0], &s[1..]);
        Ok(vec![dp, a, b, c, d])
    }
}

/// Equilibrium gain tables. Each is 2×4: rows (e, c) for the agent, acting
/// on 𝒳̂ and 𝒳̂̌; rows (s, d) for the principal, acting on 𝒳̌ and 𝒳̂̌.
#[derive(Debug, Clone)]
pub struct PaGains {
    pub agent_hat: MatPath,
    pub agent_cross: MatPath,
    pub principal_check: MatPath,
    pub principal_cross: MatPath,
}

#[derive(Debug, Clone)]
pub struct PaSolution {
    pub grid: TimeGrid,
    pub p: MatPath,
    pub pcal: [MatPath; 4],
    pub gains: PaGains,
}

impl PaSolution {
    pub fn leader_system(&self) -> LeaderSystemCid {
        LeaderSystemCid {
            grid: self.grid,
            p: self.pcal.clone(),
        }
    }
}

fn row_pair(a: Mat, b: Mat) -> Mat {
    let mut m = Mat::zeros(2, a.ncols());
    m.row_mut(0).copy_from(&a.row(0));
    m.row_mut(1).copy_from(&b.row(0));
    m
}

/// Gains at one node from P and 𝒫₁…𝒫₄.
pub fn pa_gains_at(game: &PaGame, p: &Mat, pc: &[Mat; 4]) -> [Mat; 4] {
    let b = game.blocks(p);
    let bt = game.b_tilde.transpose();
    let a1t = game.alpha[0].transpose();
    let z12 = zeros(1, 2);
    let p12 = &pc[0] + &pc[1];
    let p34 = &pc[2] + &pc[3];
    let p13 = &pc[0] + &pc[2];
    let p24 = &pc[1] + &pc[3];
    let e_hat = hcat(&(&bt * p), &z12) + hcat(&z12, &bt) * &p12;
    let e_cross = hcat(&z12, &bt) * &p34;
    let c_hat = hcat(&(-(&a1t * p)), &z12) + hcat(&z12, &(-&a1t)) * &p12;
    let c_cross = hcat(&z12, &(-&a1t)) * &p34;
    let a2t = b.alpha2_tilde.transpose();
    let a3t = b.alpha3_tilde.transpose();
    let s_check = -(&a2t * &p13);
    let s_cross = -(&a2t * &p24 + b.alpha2_bar.transpose());
    let d_check = &a3t * &p13;
    let d_cross = &a3t * &p24 + b.alpha3_bar.transpose();
    [
        row_pair(e_hat, c_hat),
        row_pair(e_cross, c_cross),
        row_pair(s_check, d_check),
        row_pair(s_cross, d_cross),
    ]
}

pub fn solve_pa(params: &PaParams, grid: TimeGrid) -> Result<PaSolution> {
    params.validate().into_result()?;
    let game = build_pa_game(params);
    let mut paths = integrate_blocks(&PaField { game: &game }, grid)?;
    let p = paths.remove(0);
    let pcal: [MatPath; 4] = paths
        .try_into()
        .map_err(|_| Error::Invalid("unexpected block count".into()))?;
    let mut tables: [Vec<Mat>; 4] = Default::default();
    for k in 0..=grid.n_steps {
        let pc = std::array::from_fn(|i| pcal[i].at(k).clone());
        for (t, g) in tables.iter_mut().zip(pa_gains_at(&game, p.at(k), &pc)) {
            t.push(g);
        }
    }
    let [a, b, c, d] = tables.map(|values| MatPath::new(grid, values));
    Ok(PaSolution {
        grid,
        p,
        pcal,
        gains: PaGains {
            agent_hat: a,
            agent_cross: b,
            principal_check: c,
            principal_cross: d,
        },
    })
}

/// Largest deviations between the contract-notation solution and the
/// generic control-independent machinery on the embedded game.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PaConsistency {
    /// Agent P against the generic follower solver.
    pub follower: f64,
    /// 𝒫₁…𝒫₄ against the generic leader solver.
    pub leader: f64,
    /// Gain tables against the generic feedback laws.
    pub gains: f64,
}

impl PaConsistency {
    pub fn max(&self) -> f64 {
        self.follower.max(self.leader).max(self.gains)
    }
}

pub fn pa_consistency(params: &PaParams, sol: &PaSolution) -> Result<PaConsistency> {
    let game = build_pa_game(params);
    let cid = game.to_cid_game();
    let grid = sol.grid;
    let p_gen = solve_follower_unchecked(&cid.to_game_spec(), grid)?;
    let p_cid = solve_cid_game_follower(&cid, grid)?;
    let l = solve_cid_game_leader(&cid, &p_cid, grid)?;
    let st: StrategyCid = build_strategies_game(&cid, &p_cid, &l)?;
    let follower = max_path_diff(&sol.p, &p_gen).max(max_path_diff(&sol.p, &p_cid));
    let leader = (0..4).map(|i| max_path_diff(&sol.pcal[i], &l.p[i])).fold(0.0, f64::max);
    let gains = [
        max_path_diff(&sol.gains.agent_hat, &st.follower_gain_hat),
        max_path_diff(&sol.gains.agent_cross, &st.follower_gain_cross),
        max_path_diff(&sol.gains.principal_check, &st.leader_gain_check),
        max_path_diff(&sol.gains.principal_cross, &st.leader_gain_cross),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(PaConsistency {
        follower,
        leader,
        gains,
    })
}

/// Closed loop of the contract game driven by the contract-notation
/// solution.
pub fn pa_closed_loop(params: &PaParams, sol: &PaSolution) -> Result<ClosedLoop> {
    let game = build_pa_game(params).to_cid_game();
    ClosedLoop::new(&game, &sol.p, &sol.leader_system())
}

/// Preference values J₁ = ½E[∫(c² − e² + m²)dt + m(T)²] and
/// J₂ = ½E[∫(d² − s² + y²)dt + y(T)²], larger is better.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PaPreferences {
    pub j1: CostEstimate,
    pub j2: CostEstimate,
}

fn path_preferences(h: f64, last: usize, xs: &[&[f64]], us: &[&[f64]]) -> (f64, f64) {
    let (mut j1, mut j2) = (0.0, 0.0);
    for k in 0..=last {
        let wt = if k == 0 || k == last { 0.5 } else { 1.0 };
        let (y, m) = (xs[k][0], xs[k][1]);
        let (e, c, s, d) = (us[k][0], us[k][1], us[k][2], us[k][3]);
        j1 += 0.5 * wt * h * (c * c - e * e + m * m);
        j2 += 0.5 * wt * h * (d * d - s * s + y * y);
    }
    let (y, m) = (xs[last][0], xs[last][1]);
    (j1 + 0.5 * m * m, j2 + 0.5 * y * y)
}

pub fn preferences_of(ens: &PathEnsemble) -> PaPreferences {
    let h = ens.grid.h();
    let last = ens.grid.n_steps;
    let (v1, v2): (Vec<f64>, Vec<f64>) = ens
        .paths
        .iter()
        .map(|p| {
            let us: Vec<Vec<f64>> =
                p.u1.iter()
                    .zip(&p.u2)
                    .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
                    .collect();
            let xs: Vec<&[f64]> = p.x.iter().map(|v| v.as_slice()).collect();
            let ur: Vec<&[f64]> = us.iter().map(|v| v.as_slice()).collect();
            path_preferences(h, last, &xs, &ur)
        })
        .unzip();
    PaPreferences {
        j1: CostEstimate::from_samples(&v1),
        j2: CostEstimate::from_samples(&v2),
    }
}

/// Preference values without storing paths.
pub fn preferences_streaming(cl: &ClosedLoop, n_paths: usize, seed: u64) -> PaPreferences {
    let h = cl.grid.h();
    let last = cl.grid.n_steps;
    let parts = par_chunks(n_paths, CHUNK, |range| {
        let mut out = Vec::with_capacity(range.len());
        for path in range {
            let dw = rng::increments(seed, rng::MAIN, path as u64, last, h);
            let (mut j1, mut j2) = (0.0, 0.0);
            cl.run_path(&dw, |k, st, u1, u2| {
                let wt = if k == 0 || k == last { 0.5 } else { 1.0 };
                let (y, m) = (st[0], st[1]);
                let (e, c, s, d) = (u1[0], u1[1], u2[0], u2[1]);
                j1 += 0.5 * wt * h * (c * c - e * e + m * m);
                j2 += 0.5 * wt * h * (d * d - s * s + y * y);
                if k == last {
                    j1 += 0.5 * m * m;
                    j2 += 0.5 * y * y;
                }
            });
            out.push((j1, j2));
        }
        out
    });
    let (v1, v2): (Vec<f64>, Vec<f64>) = parts.into_iter().flatten().unzip();
    let (m1, s1) = mean_se(&v1);
    let (m2, s2) = mean_se(&v2);
    PaPreferences {
        j1: CostEstimate {
            mean: m1,
            std_error: s1,
            n_paths,
        },
        j2: CostEstimate {
            mean: m2,
            std_error: s2,
            n_paths,
        },
    }
}

/// Simulated contract paths and the two preference values.
#[derive(Debug, Clone)]
pub struct PaSimulation {
    pub ensemble: PathEnsemble,
    pub preferences: PaPreferences,
}

pub fn simulate_pa(params: &PaParams, sol: &PaSolution, n_paths: usize, seed: u64) -> Result<PaSimulation> {
    let cl = pa_closed_loop(params, sol)?;
    let ensemble = simulate_closed_loop(&cl, n_paths, seed)?;
    let preferences = preferences_of(&ensemble);
    Ok(PaSimulation { ensemble, preferences })
}
