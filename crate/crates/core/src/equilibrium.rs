//! Feedback strategies, cost evaluation, perturbation tests and adjoint
//! reconstruction for the control-independent case.

use serde::Serialize;

use crate::assembly::{CidBlocks, CidSlots, FollowerCoeffs, Level};
use crate::error::{Error, Result};
use crate::filtering::{par_chunks, ClosedLoop, Lin, PathEnsemble, CHUNK};
use crate::game_model::{CidGame, CidSpec, MatPath, TimeGrid};
use crate::linalg::{lu_solve, zeros, Mat};
use crate::riccati::{integrate_blocks, LeaderSystemCid, RiccatiField};
use crate::rng;

/// Feedback gains u₁ = F̂·X̂ + F×·X̂̌ and u₂ = Ǧ·X̌ + G×·X̂̌ on the augmented state.
#[derive(Debug, Clone)]
pub struct StrategyCid {
    pub follower_gain_hat: MatPath,
    pub follower_gain_cross: MatPath,
    pub leader_gain_check: MatPath,
    pub leader_gain_cross: MatPath,
}

/// Gains at one node.
pub fn cid_gains(game: &CidGame, p: &Mat, lv: &Level) -> Result<[Mat; 4]> {
    let n = game.n;
    let zb = zeros(game.k1, n);
    let zc = zeros(game.k2, n);
    let b0t = game.b0.transpose();
    let c0t = game.c0.transpose();
    let n1 = |m: Mat| lu_solve(&game.n1, &m).ok_or_else(|| Error::Invalid("N1 singular".into()));
    let n2 = |m: Mat| lu_solve(&game.n2, &m).ok_or_else(|| Error::Invalid("N2 singular".into()));
    let x_only = |m: &Mat, z: &Mat| crate::linalg::hcat(m, z);
    let p_only = |m: &Mat, z: &Mat| crate::linalg::hcat(z, m);
    let [p1, p2, p3, p4] = lv;
    let hat = n1(x_only(&(&b0t * p), &zb) + p_only(&b0t, &zb) * (p1 + p2))?;
    let cross = n1(p_only(&b0t, &zb) * (p3 + p4))?;
    let check = n2(x_only(&c0t, &zc) * (p1 + p3))?;
    let lcross = n2(x_only(&c0t, &zc) * (p2 + p4) + p_only(&(&c0t * p), &zc))?;
    Ok([-hat, -cross, -check, -lcross])
}

pub fn build_strategies_game(game: &CidGame, p: &MatPath, l: &LeaderSystemCid) -> Result<StrategyCid> {
    let grid = p.grid;
    let mut cols: [Vec<Mat>; 4] = Default::default();
    for k in 0..=grid.n_steps {
        let g = cid_gains(game, p.at(k), &l.at(k))?;
        for (c, m) in cols.iter_mut().zip(g) {
            c.push(m);
        }
    }
    let [a, b, c, d] = cols.map(|v| MatPath::new(grid, v));
    Ok(StrategyCid {
        follower_gain_hat: a,
        follower_gain_cross: b,
        leader_gain_check: c,
        leader_gain_cross: d,
    })
}

pub fn build_strategies_cid(spec: &CidSpec, p: &MatPath, l: &LeaderSystemCid) -> Result<StrategyCid> {
    build_strategies_game(&CidGame::from(spec), p, l)
}

// ---------------------------------------------------------------------------
// Costs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Player {
    Follower,
    Leader,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl CostEstimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let (mean, se) = mean_se(v);
        Self {
            mean,
            std_error: se,
            n_paths: v.len(),
        }
    }
}

/// Sample mean and standard error (Welford, so constant samples give SE 0).
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let n = v.len() as f64;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (m2 / (n - 1.0) / n).sqrt())
}

fn quad(m: &Mat, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            acc += x[i] * m[(i, j)] * x[j];
        }
    }
    acc
}

/// Quadratic weights (Q, N, G) of one player.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub q: Mat,
    pub n: Mat,
    pub g: Mat,
}

impl CostWeights {
    pub fn of(game: &CidGame, who: Player) -> Self {
        match who {
            Player::Follower => Self {
                q: game.q1.clone(),
                n: game.n1.clone(),
                g: game.g1.clone(),
            },
            Player::Leader => Self {
                q: game.q2.clone(),
                n: game.n2.clone(),
                g: game.g2.clone(),
            },
        }
    }

    /// ½∫(xᵀQx + uᵀNu)dt + ½x(T)ᵀGx(T) by the trapezoidal rule.
    pub fn path_cost(&self, h: f64, xs: &[&[f64]], us: &[&[f64]]) -> f64 {
        let last = xs.len() - 1;
        let mut acc = 0.0;
        for k in 0..=last {
            let w = if k == 0 || k == last { 0.5 } else { 1.0 };
            acc += w * h * (quad(&self.q, xs[k]) + quad(&self.n, us[k]));
        }
        0.5 * acc + 0.5 * quad(&self.g, xs[last])
    }
}

/// Monte Carlo cost of one player over an ensemble; uses the physical state x.
pub fn evaluate_cost(ens: &PathEnsemble, who: Player, spec: &CidSpec) -> CostEstimate {
    evaluate_cost_game(ens, who, &CidGame::from(spec))
}

pub fn evaluate_cost_game(ens: &PathEnsemble, who: Player, game: &CidGame) -> CostEstimate {
    let w = CostWeights::of(game, who);
    let n = game.n;
    let h = ens.grid.h();
    let v: Vec<f64> = ens
        .paths
        .iter()
        .map(|p| {
            let xs: Vec<&[f64]> = p.x.iter().map(|x| &x.as_slice()[..n]).collect();
            let us: Vec<&[f64]> = match who {
                Player::Follower => p.u1.iter().map(|u| u.as_slice()).collect(),
                Player::Leader => p.u2.iter().map(|u| u.as_slice()).collect(),
            };
            w.path_cost(h, &xs, &us)
        })
        .collect();
    CostEstimate::from_samples(&v)
}

// ---------------------------------------------------------------------------
// Stationarity

/// Constant feedback gain of the perturbing player on its own estimate:
/// the leader perturbs by `gain·X̌*`, the follower by `gain·X̂*`.
#[derive(Debug, Clone)]
pub struct Direction {
    pub player: Player,
    /// k×2n (k = k₂ for the leader, k₁ for the follower).
    pub gain: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub se_b: f64,
    pub se_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbReport {
    pub player: Player,
    pub epsilons: Vec<f64>,
    #[serde(rename = "J_means")]
    pub j_means: Vec<f64>,
    #[serde(rename = "J_ses")]
    pub j_ses: Vec<f64>,
    pub j0: f64,
    pub fit: QuadFit,
    /// min over ε of [J(ε) + J(−ε) − 2J(0)] / SE, only for symmetric ε sets.
    pub convexity_margin: Option<f64>,
    pub pass: bool,
}

/// Least-squares fit of J ≈ aε² + bε + c, linear in the J values. For
/// symmetric ε sets b is the odd-part estimator Σ ε(J(ε) − J(−ε)) / Σε²
/// taken over ε > 0, which is exactly zero when J is even.
struct Fitter {
    w: [Vec<f64>; 3],
    pairs: Option<Vec<(usize, usize)>>,
    s2: f64,
    eps: Vec<f64>,
}

impl Fitter {
    fn new(eps: &[f64]) -> Result<Self> {
        let m = eps.len();
        if m < 3 {
            return Err(Error::Invalid("at least three epsilons required".into()));
        }
        let mut design = Mat::zeros(m, 3);
        for (r, e) in eps.iter().enumerate() {
            design[(r, 0)] = e * e;
            design[(r, 1)] = *e;
            design[(r, 2)] = 1.0;
        }
        let dt = design.transpose();
        let w = lu_solve(&(&dt * &design), &dt).ok_or_else(|| Error::Invalid("epsilons not distinct".into()))?;
        let row = |i: usize| w.row(i).iter().copied().collect::<Vec<_>>();
        Ok(Self {
            w: [row(0), row(1), row(2)],
            pairs: symmetric_pairs(eps),
            s2: eps.iter().map(|e| e * e).sum(),
            eps: eps.to_vec(),
        })
    }

    fn coef(&self, i: usize, js: &[f64]) -> f64 {
        self.w[i].iter().zip(js).map(|(w, j)| w * j).sum()
    }

    fn b(&self, js: &[f64]) -> f64 {
        match &self.pairs {
            Some(pairs) => pairs.iter().map(|&(i, j)| self.eps[i] * (js[i] - js[j])).sum::<f64>() / self.s2,
            None => self.coef(1, js),
        }
    }
}

/// Index pairs (ε, −ε) with ε > 0, if the set is symmetric.
fn symmetric_pairs(eps: &[f64]) -> Option<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (i, e) in eps.iter().enumerate() {
        if *e > 0.0 {
            let j = eps.iter().position(|x| *x == -e)?;
            pairs.push((i, j));
        } else if *e == 0.0 {
            return None;
        }
    }
    if 2 * pairs.len() == eps.len() {
        Some(pairs)
    } else {
        None
    }
}

/// Per-path cost as a function of ε: J(ε) = j0 + b ε + a ε² with per-path
/// (j0, lin, quad) collected by the simulation.
#[derive(Debug, Clone, Copy, Default)]
struct PathQuad {
    j0: f64,
    lin: f64,
    quad: f64,
}

/// Data of the follower's linear best response to a leader perturbation
/// δu₂ = G·X̌*: δφ̂ = Π·X̂̌* + π₀.
struct Response {
    pi: Vec<Lin>,
    pi0: Vec<Vec<f64>>,
}

struct ResponseField<'a> {
    loop_: &'a ClosedLoop,
    game: &'a CidGame,
    gain: &'a Mat,
    p: &'a MatPath,
}

impl RiccatiField for ResponseField<'_> {
    fn terminal(&self) -> Vec<Mat> {
        let n = self.game.n;
        vec![zeros(n, 2 * n), zeros(n, 1)]
    }

    fn names(&self) -> Vec<String> {
        vec!["Pi".into(), "pi0".into()]
    }

    fn eval(&self, t: f64, node: usize, s: &[Mat]) -> Result<Vec<Mat>> {
        let pk = self.p.interp(t);
        let spec = self.game.to_game_spec();
        let fc = FollowerCoeffs::new(&spec, &pk, t, node)?;
        let rsum = self.loop_.rsum_at(t);
        let l3 = &fc.l3;
        let a3 = &self.loop_.acal_m[2];
        let sig3 = &self.loop_.sig_m[2];
        let pi = &s[0];
        let dpi = -(pi * &rsum + &fc.l0 * pi + l3 * pi * a3 + &fc.l4 * self.gain);
        let dpi0 = -(&fc.l0 * &s[1] + l3 * pi * sig3);
        Ok(vec![dpi, dpi0])
    }
}

fn solve_response(loop_: &ClosedLoop, game: &CidGame, p: &MatPath, gain: &Mat) -> Result<Response> {
    let field = ResponseField { loop_, game, gain, p };
    let paths = integrate_blocks(&field, p.grid)?;
    Ok(Response {
        pi: paths[0].values.iter().map(Lin::from).collect(),
        pi0: paths[1].values.iter().map(|m| m.iter().copied().collect()).collect(),
    })
}

/// Simulates one path of the equilibrium and of the first-order perturbation
/// δ (the state under u* + εδu equals x* + εδx exactly), and returns the
/// per-path cost coefficients.
#[allow(clippy::too_many_arguments)]
fn perturbed_path(
    cl: &ClosedLoop,
    dir: &Direction,
    dirlin: &Lin,
    resp: Option<&Response>,
    w: &CostWeights,
    b0: &Lin,
    c0: &Lin,
    a: &[Lin; 4],
    fgain: &[Lin],
    dw: &[[f64; 3]],
) -> PathQuad {
    let n = cl.n;
    let d = 2 * n;
    let h = cl.grid.h();
    let last = cl.grid.n_steps;
    let k_dim = dir.gain.nrows();
    // δx and δx̂ at the current node.
    let mut dx = vec![0.0; n];
    let mut dxh = vec![0.0; n];
    let mut nx = vec![0.0; n];
    let mut nxh = vec![0.0; n];
    let mut du = vec![0.0; k_dim];
    let mut du1 = vec![0.0; cl.k1];
    let mut vhat = vec![0.0; k_dim];
    let mut dphi = vec![0.0; n];
    let mut out = PathQuad::default();
    cl.run_path(dw, |k, st, u1, u2| {
        let wt = if k == 0 || k == last { 0.5 } else { 1.0 };
        let x = &st[..n];
        du.fill(0.0);
        let u_star = match dir.player {
            Player::Leader => {
                dirlin.mv_add(&st[2 * d..3 * d], &mut du, 1.0);
                u2
            }
            Player::Follower => {
                dirlin.mv_add(&st[d..2 * d], &mut du, 1.0);
                u1
            }
        };
        out.j0 += 0.5 * wt * h * (quad(&w.q, x) + quad(&w.n, u_star));
        out.lin += wt * h * (bilin(&w.q, x, &dx) + bilin(&w.n, u_star, &du));
        out.quad += 0.5 * wt * h * (quad(&w.q, &dx) + quad(&w.n, &du));
        if k == last {
            out.j0 += 0.5 * quad(&w.g, x);
            out.lin += bilin(&w.g, x, &dx);
            out.quad += 0.5 * quad(&w.g, &dx);
            return;
        }
        let inc = &dw[k];
        nx.copy_from_slice(&dx);
        a[0].mv_add(&dx, &mut nx, h);
        for i in 0..3 {
            a[i + 1].mv_add(&dx, &mut nx, inc[i]);
        }
        match dir.player {
            Player::Leader => {
                let resp = resp.expect("leader test needs the follower response");
                let xhc = &st[3 * d..4 * d];
                // δu₁ = F_x δx̂ + F_φ δφ̂ with δφ̂ = Π X̂̌ + π₀.
                dphi.copy_from_slice(&resp.pi0[k]);
                resp.pi[k].mv_add(xhc, &mut dphi, 1.0);
                du1.fill(0.0);
                fgain[2 * k].mv_add(&dxh, &mut du1, 1.0);
                fgain[2 * k + 1].mv_add(&dphi, &mut du1, 1.0);
                vhat.fill(0.0);
                dirlin.mv_add(xhc, &mut vhat, 1.0);
                b0.mv_add(&du1, &mut nx, h);
                c0.mv_add(&du, &mut nx, h);
                nxh.copy_from_slice(&dxh);
                a[0].mv_add(&dxh, &mut nxh, h);
                b0.mv_add(&du1, &mut nxh, h);
                c0.mv_add(&vhat, &mut nxh, h);
                a[1].mv_add(&dxh, &mut nxh, inc[0]);
                a[3].mv_add(&dxh, &mut nxh, inc[2]);
                std::mem::swap(&mut dxh, &mut nxh);
            }
            Player::Follower => {
                b0.mv_add(&du, &mut nx, h);
            }
        }
        std::mem::swap(&mut dx, &mut nx);
    });
    out
}

fn bilin(m: &Mat, x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            acc += x[i] * m[(i, j)] * y[j];
        }
    }
    acc
}

/// Finite-difference stationarity test under common random numbers.
///
/// The leader's perturbation is answered by the follower's best response;
/// the follower is tested against the leader's equilibrium control process.
pub fn stationarity_test_game(
    cl: &ClosedLoop,
    dir: &Direction,
    epsilons: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PerturbReport> {
    let game = &cl.game;
    let d = 2 * game.n;
    let expect_rows = match dir.player {
        Player::Leader => game.k2,
        Player::Follower => game.k1,
    };
    if dir.gain.shape() != (expect_rows, d) {
        return Err(Error::Invalid(format!(
            "direction gain must be {expect_rows}x{d}, got {}x{}",
            dir.gain.nrows(),
            dir.gain.ncols()
        )));
    }
    let fitter = Fitter::new(epsilons)?;
    let who = dir.player;
    let w = CostWeights::of(game, who);
    let resp = match who {
        Player::Leader => Some(solve_response(cl, game, &cl.p, &dir.gain)?),
        Player::Follower => None,
    };
    let spec = game.to_game_spec();
    // Follower feedback on (δx̂, δφ̂): −N₁⁻¹B₀ᵀP and −N₁⁻¹B₀ᵀ.
    let mut fgain = Vec::with_capacity(2 * (cl.grid.n_steps + 1));
    for k in 0..=cl.grid.n_steps {
        let fc = FollowerCoeffs::new(&spec, cl.p.at(k), cl.grid.t(k), k)?;
        let fx = -lu_solve(&fc.nbar1, &fc.s1.transpose()).expect("checked");
        let fphi = -lu_solve(&fc.nbar1, &game.b0.transpose()).expect("checked");
        fgain.push(Lin::from(&fx));
        fgain.push(Lin::from(&fphi));
    }
    let dirlin = Lin::from(&dir.gain);
    let b0 = Lin::from(&game.b0);
    let c0 = Lin::from(&game.c0);
    let a: [Lin; 4] = std::array::from_fn(|i| Lin::from(&game.a[i]));
    let h = cl.grid.h();
    let n_steps = cl.grid.n_steps;
    // Per chunk: Σ over paths of J(ε) for each ε, Σ J², Σ of fitted a and b and their squares.
    let m = epsilons.len();
    let chunks = par_chunks(n_paths, CHUNK, |range| {
        let mut acc = vec![0.0; 2 * m + 5];
        for path in range {
            let dw = rng::increments(seed, rng::MAIN, path as u64, n_steps, h);
            let q = perturbed_path(cl, dir, &dirlin, resp.as_ref(), &w, &b0, &c0, &a, &fgain, &dw);
            let js: Vec<f64> = epsilons.iter().map(|e| q.j0 + q.lin * e + q.quad * e * e).collect();
            let fa = fitter.coef(0, &js);
            let fb = fitter.b(&js);
            for (i, j) in js.iter().enumerate() {
                acc[i] += j;
                acc[m + i] += j * j;
            }
            acc[2 * m] += fa;
            acc[2 * m + 1] += fa * fa;
            acc[2 * m + 2] += fb;
            acc[2 * m + 3] += fb * fb;
            acc[2 * m + 4] += q.j0;
        }
        acc
    });
    let mut tot = vec![0.0; 2 * m + 5];
    for c in &chunks {
        for (t, v) in tot.iter_mut().zip(c) {
            *t += v;
        }
    }
    let nf = n_paths as f64;
    let se = |s: f64, s2: f64| {
        let mean = s / nf;
        let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
        (mean, (var / nf).sqrt())
    };
    let mut j_means = Vec::with_capacity(m);
    let mut j_ses = Vec::with_capacity(m);
    for i in 0..m {
        let (mu, s) = se(tot[i], tot[m + i]);
        j_means.push(mu);
        j_ses.push(s);
    }
    let spread = j_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - j_means.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = j_means.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if spread <= 64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateFit);
    }
    let (fa, se_a) = se(tot[2 * m], tot[2 * m + 1]);
    let (fb, se_b) = se(tot[2 * m + 2], tot[2 * m + 3]);
    let fc = fitter.coef(2, &j_means);
    // With an exactly even J the odd-part estimator is exactly zero per path.
    let se_b = if tot[2 * m + 2] == 0.0 && tot[2 * m + 3] == 0.0 {
        0.0
    } else {
        se_b
    };
    let j0 = tot[2 * m + 4] / nf;
    let convexity_margin = symmetric_pairs(epsilons).map(|pairs| {
        pairs
            .iter()
            .map(|&(i, j)| {
                let v = j_means[i] + j_means[j] - 2.0 * j0;
                let s = (j_ses[i].powi(2) + j_ses[j].powi(2)).sqrt() * 2.0;
                if s > 0.0 {
                    v / s
                } else if v >= 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min)
    });
    let pass = fb.abs() <= 3.0 * se_b && fa > 0.0;
    Ok(PerturbReport {
        player: who,
        epsilons: epsilons.to_vec(),
        j_means,
        j_ses,
        j0,
        fit: QuadFit {
            a: fa,
            b: fb,
            c: fc,
            se_b,
            se_a,
        },
        convexity_margin,
        pass,
    })
}

/// Scalar-game entry point.
pub fn stationarity_test(
    spec: &CidSpec,
    p: &MatPath,
    l: &LeaderSystemCid,
    dir: &Direction,
    epsilons: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PerturbReport> {
    let cl = ClosedLoop::new(&CidGame::from(spec), p, l)?;
    stationarity_test_game(&cl, dir, epsilons, n_paths, seed)
}

// ---------------------------------------------------------------------------
// Adjoint reconstruction

/// Y and Z₁…Z₃ along each path of an ensemble.
#[derive(Debug, Clone)]
pub struct ReconstructedAdjoint {
    pub grid: TimeGrid,
    /// `y[path][node]`, 2n entries.
    pub y: Vec<Vec<Vec<f64>>>,
    /// `z[path][node][i]`, 2n entries.
    pub z: Vec<Vec<[Vec<f64>; 3]>>,
}

/// Y and Z at one node from the four state blocks.
pub fn adjoint_at(cl: &ClosedLoop, k: usize, st: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
    let d = 2 * cl.n;
    let pk = &cl.pcal[k];
    let blocks: [&[f64]; 4] = std::array::from_fn(|b| &st[b * d..(b + 1) * d]);
    let mut y = vec![0.0; d];
    for b in 0..4 {
        pk[b].mv_add(blocks[b], &mut y, 1.0);
    }
    let z = std::array::from_fn(|i| {
        let mut zi = vec![0.0; d];
        for b in 0..4 {
            if cl.routing[b][i] {
                let mut diff = cl.sig[i].clone();
                cl.acal[i].mv_add(blocks[b], &mut diff, 1.0);
                pk[b].mv_add(&diff, &mut zi, 1.0);
            }
        }
        zi
    });
    (y, z)
}

pub fn reconstruct_adjoint(ens: &PathEnsemble, cl: &ClosedLoop) -> ReconstructedAdjoint {
    let mut y = Vec::with_capacity(ens.paths.len());
    let mut z = Vec::with_capacity(ens.paths.len());
    for p in &ens.paths {
        let mut yp = Vec::with_capacity(p.x.len());
        let mut zp = Vec::with_capacity(p.x.len());
        for k in 0..p.x.len() {
            let st = p.stacked(k);
            let (yk, zk) = adjoint_at(cl, k, &st);
            yp.push(yk);
            zp.push(zk);
        }
        y.push(yp);
        z.push(zp);
    }
    ReconstructedAdjoint { grid: ens.grid, y, z }
}

/// Driver f of −dY = f dt − Σ Zᵢ dWᵢ at one node.
pub fn driver_at(cl: &ClosedLoop, k: usize, st: &[f64]) -> Vec<f64> {
    let d = 2 * cl.n;
    let mut f = vec![0.0; d];
    for b in 0..4 {
        cl.fslots[k][b].mv_add(&st[b * d..(b + 1) * d], &mut f, 1.0);
    }
    f
}

/// Euler consistency of the reconstructed Y: per step, the residual
/// r_k = ΔY + f_k h − Σ Z_{i,k} ΔW_{i,k} should have zero mean up to O(h²).
#[derive(Debug, Clone, Serialize)]
pub struct AdjointReport {
    pub n_paths: usize,
    /// max over paths of ‖Y(T) − 𝒢₂X(T)‖_∞.
    pub terminal_error: f64,
    /// Per step, max over components of |mean r| / SE.
    pub studentized: Vec<f64>,
    pub max_studentized: f64,
    /// Per step, max over components of |mean r|.
    pub mean_abs: Vec<f64>,
}

pub fn adjoint_check(cl: &ClosedLoop, n_paths: usize, seed: u64) -> AdjointReport {
    let d = 2 * cl.n;
    let n_steps = cl.grid.n_steps;
    let h = cl.grid.h();
    let g2 = Lin::from(&cl.blocks_t.g2);
    let chunks = par_chunks(n_paths, CHUNK, |range| {
        let mut s1 = vec![0.0; n_steps * d];
        let mut s2 = vec![0.0; n_steps * d];
        let mut term = 0.0f64;
        for path in range {
            let dw = rng::increments(seed, rng::MAIN, path as u64, n_steps, h);
            let mut prev: Option<(Vec<f64>, Vec<f64>, [Vec<f64>; 3])> = None;
            cl.run_path(&dw, |k, st, _, _| {
                let (y, z) = adjoint_at(cl, k, st);
                if let Some((py, pf, pz)) = prev.take() {
                    let inc = &dw[k - 1];
                    for c in 0..d {
                        let mut r = y[c] - py[c] + pf[c] * h;
                        for i in 0..3 {
                            r -= pz[i][c] * inc[i];
                        }
                        s1[(k - 1) * d + c] += r;
                        s2[(k - 1) * d + c] += r * r;
                    }
                }
                if k == n_steps {
                    let mut gx = vec![0.0; d];
                    g2.mv_add(&st[..d], &mut gx, 1.0);
                    for c in 0..d {
                        term = term.max((y[c] - gx[c]).abs());
                    }
                } else {
                    prev = Some((y, driver_at(cl, k, st), z));
                }
            });
        }
        (s1, s2, term)
    });
    let mut s1 = vec![0.0; n_steps * d];
    let mut s2 = vec![0.0; n_steps * d];
    let mut term = 0.0f64;
    for (a, b, t) in &chunks {
        for i in 0..s1.len() {
            s1[i] += a[i];
            s2[i] += b[i];
        }
        term = term.max(*t);
    }
    let nf = n_paths as f64;
    let mut studentized = Vec::with_capacity(n_steps);
    let mut mean_abs = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let mut worst = 0.0f64;
        let mut worst_mean = 0.0f64;
        for c in 0..d {
            let mean = s1[k * d + c] / nf;
            let var = ((s2[k * d + c] - nf * mean * mean) / (nf - 1.0)).max(0.0);
            let se = (var / nf).sqrt();
            let z = if se > 0.0 {
                mean.abs() / se
            } else if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
            worst_mean = worst_mean.max(mean.abs());
        }
        studentized.push(worst);
        mean_abs.push(worst_mean);
    }
    let max_studentized = studentized.iter().cloned().fold(0.0, f64::max);
    AdjointReport {
        n_paths,
        terminal_error: term,
        studentized,
        max_studentized,
        mean_abs,
    }
}

/// Slot form of the closed loop at one node (drift R, driver f).
pub fn slots_at(game: &CidGame, p: &Mat, lv: &Level) -> Result<CidSlots> {
    Ok(CidSlots::new(&CidBlocks::new(game, p)?, lv))
}
