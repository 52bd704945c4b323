//! Euler–Maruyama simulation of the closed loop (X, X̂, X̌, X̂̌) on shared
//! noise, the nested Monte Carlo conditional-expectation oracle and the
//! tower-property check.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::{CidBlocks, CidSlots, Level};
use crate::equilibrium::{build_strategies_game, StrategyCid};
use crate::error::{Error, Result};
use crate::game_model::{CidGame, CidSpec, InfoPattern, MatPath, Observed, TimeGrid};
use crate::linalg::{Mat, Vector};
use crate::riccati::LeaderSystemCid;
use crate::rng;

/// Paths per parallel work unit. Fixed so that reductions do not depend on
/// the thread count.
pub const CHUNK: usize = 64;

/// Runs `f` on consecutive path ranges in parallel and returns the results
/// in range order.
pub fn par_chunks<A: Send>(n_paths: usize, chunk: usize, f: impl Fn(Range<usize>) -> A + Sync) -> Vec<A> {
    let n_chunks = n_paths.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| f(c * chunk..((c + 1) * chunk).min(n_paths)))
        .collect()
}

/// Row-major dense matrix for allocation-free mat-vec products.
#[derive(Debug, Clone, PartialEq)]
pub struct Lin {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for Lin {
    fn from(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl Lin {
    /// y += a · M x.
    #[inline]
    pub fn mv_add(&self, x: &[f64], y: &mut [f64], a: f64) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (m, v) in row.iter().zip(x) {
                acc += m * v;
            }
            y[i] += a * acc;
        }
    }
}

/// Block order in the stacked state.
pub const X: usize = 0;
pub const XHAT: usize = 1;
pub const XCHECK: usize = 2;
pub const XHATCHECK: usize = 3;

/// Slot arguments (F, H, C, HC) of each block's drift.
const ARGS: [[usize; 4]; 4] = [
    [X, XHAT, XCHECK, XHATCHECK],
    [XHAT, XHAT, XHATCHECK, XHATCHECK],
    [XCHECK, XHATCHECK, XCHECK, XHATCHECK],
    [XHATCHECK, XHATCHECK, XHATCHECK, XHATCHECK],
];

/// Closed-loop coefficients of a solved control-independent game, tabulated
/// per node.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub game: CidGame,
    pub grid: TimeGrid,
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    pub p: MatPath,
    pub leader: LeaderSystemCid,
    pub strategy: StrategyCid,
    pub info: InfoPattern,
    /// Drift slots R_F, R_H, R_C, R_HC per node.
    pub rslots: Vec<[Lin; 4]>,
    pub rslots_m: Vec<Level>,
    /// R_F + R_H + R_C + R_HC per node.
    pub rsum: Vec<Mat>,
    /// Driver slots per node.
    pub fslots: Vec<[Lin; 4]>,
    /// 𝒫₁…𝒫₄ per node.
    pub pcal: Vec<[Lin; 4]>,
    /// Follower (F̂, F×) and leader (Ǧ, G×) gains per node.
    pub gains: Vec<[Lin; 4]>,
    /// Per node, the stacked control map (u₁; u₂) = U·state.
    pub control: Vec<Lin>,
    /// Whether 𝒜ᵢ and σᵢ are nonzero.
    noise_active: [(bool, bool); 3],
    /// 𝒜₁, 𝒜₂, 𝒜₃.
    pub acal: [Lin; 3],
    pub acal_m: [Mat; 3],
    /// Additive noise (σᵢ; 0).
    pub sig: [Vec<f64>; 3],
    pub sig_m: [Mat; 3],
    /// `routing[b][i]`: block b is driven by Wᵢ₊₁.
    pub routing: [[bool; 3]; 4],
    pub x0: Vec<f64>,
    pub blocks_t: CidBlocks,
}

impl ClosedLoop {
    pub fn new(game: &CidGame, p: &MatPath, leader: &LeaderSystemCid) -> Result<Self> {
        Self::with_info(game, p, leader, InfoPattern::CANONICAL)
    }

    /// `info` only changes the noise routing of X̂, X̌, X̂̌; the gains are those
    /// of the canonical pattern.
    pub fn with_info(game: &CidGame, p: &MatPath, leader: &LeaderSystemCid, info: InfoPattern) -> Result<Self> {
        let grid = p.grid;
        let n = game.n;
        let strategy = build_strategies_game(game, p, leader)?;
        let mut rslots = Vec::with_capacity(grid.n_steps + 1);
        let mut rslots_m = Vec::with_capacity(grid.n_steps + 1);
        let mut fslots = Vec::with_capacity(grid.n_steps + 1);
        let mut pcal = Vec::with_capacity(grid.n_steps + 1);
        let mut gains = Vec::with_capacity(grid.n_steps + 1);
        let mut blocks_t = None;
        for k in 0..=grid.n_steps {
            let b = CidBlocks::new(game, p.at(k))?;
            let lv = leader.at(k);
            let s = CidSlots::new(&b, &lv);
            rslots.push(s.r.each_ref().map(Lin::from));
            fslots.push(s.f.each_ref().map(Lin::from));
            rslots_m.push(s.r);
            pcal.push(lv.each_ref().map(Lin::from));
            gains.push([
                Lin::from(strategy.follower_gain_hat.at(k)),
                Lin::from(strategy.follower_gain_cross.at(k)),
                Lin::from(strategy.leader_gain_check.at(k)),
                Lin::from(strategy.leader_gain_cross.at(k)),
            ]);
            if k == grid.n_steps {
                blocks_t = Some(b);
            }
        }
        let blocks_t = blocks_t.expect("grid has nodes");
        let d = 2 * n;
        let control = gains
            .iter()
            .map(|g: &[Lin; 4]| {
                let mut m = Mat::zeros(game.k1 + game.k2, 4 * d);
                let put = |m: &mut Mat, g: &Lin, r0: usize, c0: usize| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            m[(r0 + i, c0 + j)] = g.data[i * g.cols + j];
                        }
                    }
                };
                put(&mut m, &g[0], 0, XHAT * d);
                put(&mut m, &g[1], 0, XHATCHECK * d);
                put(&mut m, &g[2], game.k1, XCHECK * d);
                put(&mut m, &g[3], game.k1, XHATCHECK * d);
                Lin::from(&m)
            })
            .collect();
        let rsum = rslots_m.iter().map(|r| &r[0] + &r[1] + &r[2] + &r[3]).collect();
        let acal_m = blocks_t.a.clone();
        let sig_m: [Mat; 3] = std::array::from_fn(|i| {
            let mut m = Mat::zeros(2 * n, 1);
            for r in 0..n {
                m[(r, 0)] = game.sigma[i][r];
            }
            m
        });
        let common = info.common();
        let routing = [
            Observed::ALL.0,
            info.follower_observes.0,
            info.leader_observes.0,
            common.0,
        ];
        let noise_active =
            std::array::from_fn(|i: usize| (acal_m[i].iter().any(|v| *v != 0.0), sig_m[i].iter().any(|v| *v != 0.0)));
        let mut x0 = vec![0.0; 2 * n];
        x0[..n].copy_from_slice(game.x0.as_slice());
        Ok(Self {
            game: game.clone(),
            grid,
            n,
            k1: game.k1,
            k2: game.k2,
            p: p.clone(),
            leader: leader.clone(),
            strategy,
            info,
            rslots,
            rslots_m,
            rsum,
            fslots,
            pcal,
            gains,
            control,
            noise_active,
            acal: acal_m.each_ref().map(Lin::from),
            acal_m,
            sig: sig_m.each_ref().map(|m| m.iter().copied().collect()),
            sig_m,
            routing,
            x0,
            blocks_t,
        })
    }

    /// R_F + R_H + R_C + R_HC, linearly interpolated in t.
    pub fn rsum_at(&self, t: f64) -> Mat {
        let sum = &self.rsum;
        let h = self.grid.h();
        let s = (t / h).clamp(0.0, self.grid.n_steps as f64);
        let k = (s.floor() as usize).min(self.grid.n_steps - 1);
        let w = s - k as f64;
        &sum[k] * (1.0 - w) + &sum[k + 1] * w
    }

    /// Simulates one path with the given increments and calls
    /// `visit(k, state, u1, u2)` at every node, the state being the four
    /// stacked 2n-blocks (X, X̂, X̌, X̂̌).
    pub fn run_path(&self, dw: &[[f64; 3]], mut visit: impl FnMut(usize, &[f64], &[f64], &[f64])) {
        let d = 2 * self.n;
        let mut st = Vec::with_capacity(4 * d);
        for _ in 0..4 {
            st.extend_from_slice(&self.x0);
        }
        let mut next = vec![0.0; 4 * d];
        let mut u = vec![0.0; self.k1 + self.k2];
        let h = self.grid.h();
        for k in 0..=self.grid.n_steps {
            u.fill(0.0);
            self.control[k].mv_add(&st, &mut u, 1.0);
            visit(k, &st, &u[..self.k1], &u[self.k1..]);
            if k == self.grid.n_steps {
                break;
            }
            let inc = &dw[k];
            let slots = &self.rslots[k];
            // Slot by slot in a fixed order, so that coinciding blocks step identically.
            for (b, args) in ARGS.iter().enumerate() {
                let cur = &st[b * d..(b + 1) * d];
                let out = &mut next[b * d..(b + 1) * d];
                out.fill(0.0);
                for (slot, &a) in args.iter().enumerate() {
                    slots[slot].mv_add(&st[a * d..(a + 1) * d], out, 1.0);
                }
                for (o, c) in out.iter_mut().zip(cur) {
                    *o = c + h * *o;
                }
                for i in 0..3 {
                    let w = inc[i];
                    if !self.routing[b][i] || w == 0.0 {
                        continue;
                    }
                    if self.noise_active[i].0 {
                        self.acal[i].mv_add(cur, out, w);
                    }
                    if self.noise_active[i].1 {
                        for (o, s) in out.iter_mut().zip(&self.sig[i]) {
                            *o += w * s;
                        }
                    }
                }
            }
            std::mem::swap(&mut st, &mut next);
        }
    }

    /// One path recorded in full.
    pub fn record_path(&self, seed: u64, path: u64) -> Result<PathRecord> {
        let h = self.grid.h();
        let dw = rng::increments(seed, rng::MAIN, path, self.grid.n_steps, h);
        self.record_with(dw, path)
    }

    pub fn record_with(&self, dw: Vec<[f64; 3]>, path: u64) -> Result<PathRecord> {
        let d = 2 * self.n;
        let m = self.grid.n_steps + 1;
        let mut rec = PathRecord {
            x: Vec::with_capacity(m),
            xhat: Vec::with_capacity(m),
            xcheck: Vec::with_capacity(m),
            xhatcheck: Vec::with_capacity(m),
            u1: Vec::with_capacity(m),
            u2: Vec::with_capacity(m),
            dw: Vec::new(),
        };
        let mut bad: Option<usize> = None;
        self.run_path(&dw, |k, st, u1, u2| {
            if bad.is_none() && st.iter().any(|v| !v.is_finite()) {
                bad = Some(k);
            }
            rec.x.push(Vector::from_column_slice(&st[..d]));
            rec.xhat.push(Vector::from_column_slice(&st[d..2 * d]));
            rec.xcheck.push(Vector::from_column_slice(&st[2 * d..3 * d]));
            rec.xhatcheck.push(Vector::from_column_slice(&st[3 * d..4 * d]));
            rec.u1.push(Vector::from_column_slice(u1));
            rec.u2.push(Vector::from_column_slice(u2));
        });
        if let Some(k) = bad {
            return Err(Error::NonFinite {
                t: self.grid.t(k),
                which: format!("path {path}"),
            });
        }
        rec.dw = dw;
        Ok(rec)
    }
}

/// One simulated path: the four state variants, both controls and the
/// increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub x: Vec<Vector>,
    pub xhat: Vec<Vector>,
    pub xcheck: Vec<Vector>,
    pub xhatcheck: Vec<Vector>,
    pub u1: Vec<Vector>,
    pub u2: Vec<Vector>,
    pub dw: Vec<[f64; 3]>,
}

impl PathRecord {
    /// The four blocks at node k, stacked.
    pub fn stacked(&self, k: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.x[k].len());
        for b in [&self.x, &self.xhat, &self.xcheck, &self.xhatcheck] {
            v.extend_from_slice(b[k].as_slice());
        }
        v
    }

    pub fn block(&self, b: usize) -> &[Vector] {
        match b {
            X => &self.x,
            XHAT => &self.xhat,
            XCHECK => &self.xcheck,
            _ => &self.xhatcheck,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub paths: Vec<PathRecord>,
}

pub fn simulate_closed_loop(cl: &ClosedLoop, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    let paths: Vec<PathRecord> = (0..n_paths)
        .into_par_iter()
        .map(|p| cl.record_path(seed, p as u64))
        .collect::<Result<_>>()?;
    Ok(PathEnsemble {
        grid: cl.grid,
        n_paths,
        seed,
        paths,
    })
}

pub fn simulate_cid_closed_loop(
    spec: &CidSpec,
    p: &MatPath,
    l: &LeaderSystemCid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let cl = ClosedLoop::new(&CidGame::from(spec), p, l)?;
    simulate_closed_loop(&cl, n_paths, seed)
}

// ---------------------------------------------------------------------------
// Nested Monte Carlo

/// Brute-force conditional expectations E[X(t_k) | observed noise].
#[derive(Debug, Clone)]
pub struct ConditionalEstimate {
    pub grid: TimeGrid,
    pub which: Observed,
    pub n_inner: usize,
    /// `nested[o][k]`: inner average of X for outer path o.
    pub nested: Vec<Vec<Vector>>,
    /// The simulated filter block matching `which` on the outer path.
    pub filter: Vec<Vec<Vector>>,
    /// X on the outer path.
    pub x: Vec<Vec<Vector>>,
}

/// The state block that is the conditional expectation under `which`.
pub fn filter_block(info: &InfoPattern, which: Observed) -> Option<usize> {
    if which == Observed::ALL {
        Some(X)
    } else if which == info.follower_observes {
        Some(XHAT)
    } else if which == info.leader_observes {
        Some(XCHECK)
    } else if which == info.common() {
        Some(XHATCHECK)
    } else {
        None
    }
}

pub fn nested_conditional_mc(
    cl: &ClosedLoop,
    which: Observed,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<ConditionalEstimate> {
    let block = filter_block(&cl.info, which)
        .ok_or_else(|| Error::Invalid("conditioning set matches no filter of the information pattern".into()))?;
    let d = 2 * cl.n;
    let n_steps = cl.grid.n_steps;
    let h = cl.grid.h();
    let results: Vec<Result<(Vec<Vector>, Vec<Vector>, Vec<Vector>)>> = (0..n_outer)
        .into_par_iter()
        .map(|o| {
            let outer = cl.record_path(seed, o as u64)?;
            let mut sum = vec![0.0; (n_steps + 1) * d];
            for j in 0..n_inner {
                let inner = rng::increments(seed, rng::INNER, (o * n_inner + j) as u64, n_steps, h);
                let dw: Vec<[f64; 3]> = outer
                    .dw
                    .iter()
                    .zip(&inner)
                    .map(|(a, b)| std::array::from_fn(|i| if which.sees(i) { a[i] } else { b[i] }))
                    .collect();
                let mut bad = false;
                cl.run_path(&dw, |k, st, _, _| {
                    for c in 0..d {
                        sum[k * d + c] += st[c];
                    }
                    bad |= st[..d].iter().any(|v| !v.is_finite());
                });
                if bad {
                    return Err(Error::NonFinite {
                        t: cl.grid.horizon,
                        which: format!("nested path {o}/{j}"),
                    });
                }
            }
            let nested = (0..=n_steps)
                .map(|k| Vector::from_iterator(d, sum[k * d..(k + 1) * d].iter().map(|v| v / n_inner as f64)))
                .collect();
            Ok((nested, outer.block(block).to_vec(), outer.x))
        })
        .collect();
    let mut nested = Vec::with_capacity(n_outer);
    let mut filter = Vec::with_capacity(n_outer);
    let mut x = Vec::with_capacity(n_outer);
    for r in results {
        let (a, b, c) = r?;
        nested.push(a);
        filter.push(b);
        x.push(c);
    }
    Ok(ConditionalEstimate {
        grid: cl.grid,
        which,
        n_inner,
        nested,
        filter,
        x,
    })
}

/// RMSE between the nested estimate and the filter on state component `c`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FilterAgreement {
    /// Pooled over outer paths and nodes.
    pub rmse: f64,
    /// At t = T only.
    pub rmse_terminal: f64,
    /// Sample standard deviation of x(T) over the outer paths.
    pub sd_terminal: f64,
}

pub fn filter_agreement(est: &ConditionalEstimate, c: usize) -> FilterAgreement {
    let last = est.grid.n_steps;
    let mut sq = 0.0;
    let mut sq_t = 0.0;
    let mut count = 0usize;
    for (nest, filt) in est.nested.iter().zip(&est.filter) {
        for k in 0..=last {
            let e = nest[k][c] - filt[k][c];
            sq += e * e;
            count += 1;
            if k == last {
                sq_t += e * e;
            }
        }
    }
    let xt: Vec<f64> = est.x.iter().map(|p| p[last][c]).collect();
    let n = xt.len() as f64;
    let mean = xt.iter().sum::<f64>() / n;
    let sd = (xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    FilterAgreement {
        rmse: (sq / count as f64).sqrt(),
        rmse_terminal: (sq_t / n).sqrt(),
        sd_terminal: sd,
    }
}

// ---------------------------------------------------------------------------
// Tower property

/// Studentized gaps of the paired differences X − X̂, X − X̌, X̂ − X̂̌ per node.
#[derive(Debug, Clone, Serialize)]
pub struct TowerReport {
    pub n_paths: usize,
    pub gaps: Vec<[f64; 3]>,
    pub max_gap: [f64; 3],
    /// Nodes with any gap above the threshold.
    pub flagged: Vec<usize>,
    pub threshold: f64,
    pub pass: bool,
}

pub const TOWER_THRESHOLD: f64 = 4.0;
const PAIRS: [(usize, usize); 3] = [(X, XHAT), (X, XCHECK), (XHAT, XHATCHECK)];

/// Running sums of the paired differences, per node, pair and component.
#[derive(Debug, Clone)]
pub struct TowerAccum {
    d: usize,
    mu: Vec<f64>,
    m2: Vec<f64>,
    n: usize,
}

impl TowerAccum {
    pub fn new(n_nodes: usize, d: usize) -> Self {
        Self {
            d,
            mu: vec![0.0; n_nodes * 3 * d],
            m2: vec![0.0; n_nodes * 3 * d],
            n: 0,
        }
    }

    /// Starts a new path; call before its [`TowerAccum::add`] calls.
    pub fn next_path(&mut self) {
        self.n += 1;
    }

    /// Adds node k of the current path given the four blocks.
    pub fn add(&mut self, k: usize, blocks: [&[f64]; 4]) {
        let d = self.d;
        let nf = self.n as f64;
        for (p, (a, b)) in PAIRS.iter().enumerate() {
            for c in 0..d {
                let v = blocks[*a][c] - blocks[*b][c];
                let idx = (k * 3 + p) * d + c;
                let delta = v - self.mu[idx];
                self.mu[idx] += delta / nf;
                self.m2[idx] += delta * (v - self.mu[idx]);
            }
        }
    }

    pub fn merge(&mut self, o: &TowerAccum) {
        let (na, nb) = (self.n as f64, o.n as f64);
        let total = na + nb;
        if o.n == 0 {
            return;
        }
        for i in 0..self.mu.len() {
            let delta = o.mu[i] - self.mu[i];
            self.mu[i] += delta * nb / total;
            self.m2[i] += o.m2[i] + delta * delta * na * nb / total;
        }
        self.n += o.n;
    }

    pub fn report(&self) -> TowerReport {
        let d = self.d;
        let nodes = self.mu.len() / (3 * d);
        let nf = self.n as f64;
        let mut gaps = Vec::with_capacity(nodes);
        let mut flagged = Vec::new();
        let mut max_gap = [0.0f64; 3];
        for k in 0..nodes {
            let mut g = [0.0f64; 3];
            for (p, gp) in g.iter_mut().enumerate() {
                for c in 0..d {
                    let idx = (k * 3 + p) * d + c;
                    let mean = self.mu[idx];
                    let se = (self.m2[idx] / (nf - 1.0) / nf).sqrt();
                    // Differences that vanish on every path give a zero gap.
                    let z = if mean == 0.0 && self.m2[idx] == 0.0 {
                        0.0
                    } else if se > 0.0 {
                        mean.abs() / se
                    } else {
                        f64::INFINITY
                    };
                    *gp = gp.max(z);
                }
                max_gap[p] = max_gap[p].max(*gp);
            }
            if g.iter().any(|v| *v > TOWER_THRESHOLD) {
                flagged.push(k);
            }
            gaps.push(g);
        }
        TowerReport {
            n_paths: self.n,
            pass: flagged.is_empty(),
            gaps,
            max_gap,
            flagged,
            threshold: TOWER_THRESHOLD,
        }
    }
}

pub fn tower_check(ens: &PathEnsemble) -> TowerReport {
    let nodes = ens.grid.n_steps + 1;
    let d = ens.paths.first().map(|p| p.x[0].len()).unwrap_or(0);
    let mut acc = TowerAccum::new(nodes, d);
    for p in &ens.paths {
        acc.next_path();
        for k in 0..nodes {
            acc.add(
                k,
                [
                    p.x[k].as_slice(),
                    p.xhat[k].as_slice(),
                    p.xcheck[k].as_slice(),
                    p.xhatcheck[k].as_slice(),
                ],
            );
        }
    }
    acc.report()
}

/// Tower check without storing paths.
pub fn tower_check_streaming(cl: &ClosedLoop, n_paths: usize, seed: u64) -> TowerReport {
    let nodes = cl.grid.n_steps + 1;
    let d = 2 * cl.n;
    let h = cl.grid.h();
    let parts = par_chunks(n_paths, CHUNK, |range| {
        let mut acc = TowerAccum::new(nodes, d);
        for path in range {
            let dw = rng::increments(seed, rng::MAIN, path as u64, cl.grid.n_steps, h);
            acc.next_path();
            cl.run_path(&dw, |k, st, _, _| {
                acc.add(k, [&st[..d], &st[d..2 * d], &st[2 * d..3 * d], &st[3 * d..]]);
            });
        }
        acc
    });
    let mut tot = TowerAccum::new(nodes, d);
    for p in &parts {
        tot.merge(p);
    }
    tot.report()
}

/// Per-node mean and standard error of every state component and control,
/// without storing paths.
#[derive(Debug, Clone)]
pub struct NodeSummary {
    pub t: Vec<f64>,
    /// Column labels.
    pub columns: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

pub fn summarize(cl: &ClosedLoop, n_paths: usize, seed: u64) -> NodeSummary {
    let nodes = cl.grid.n_steps + 1;
    let d = 2 * cl.n;
    let width = 4 * d + cl.k1 + cl.k2;
    let h = cl.grid.h();
    // Welford accumulators (mean, M2) per chunk, merged in chunk order.
    let parts = par_chunks(n_paths, CHUNK, |range| {
        let mut count = 0.0;
        let mut mu = vec![0.0; nodes * width];
        let mut m2 = vec![0.0; nodes * width];
        for path in range {
            count += 1.0;
            let dw = rng::increments(seed, rng::MAIN, path as u64, cl.grid.n_steps, h);
            cl.run_path(&dw, |k, st, u1, u2| {
                for (c, v) in st.iter().chain(u1).chain(u2).enumerate() {
                    let i = k * width + c;
                    let delta = v - mu[i];
                    mu[i] += delta / count;
                    m2[i] += delta * (v - mu[i]);
                }
            });
        }
        (count, mu, m2)
    });
    let mut count = 0.0;
    let mut mu = vec![0.0; nodes * width];
    let mut m2 = vec![0.0; nodes * width];
    for (nb, mb, qb) in &parts {
        let total = count + nb;
        for i in 0..mu.len() {
            let delta = mb[i] - mu[i];
            mu[i] += delta * nb / total;
            m2[i] += qb[i] + delta * delta * count * nb / total;
        }
        count = total;
    }
    let nf = n_paths as f64;
    let mut mean = Vec::with_capacity(nodes);
    let mut se = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let row = k * width..(k + 1) * width;
        mean.push(mu[row.clone()].to_vec());
        se.push(
            m2[row]
                .iter()
                .map(|q| if n_paths > 1 { (q / (nf - 1.0) / nf).sqrt() } else { 0.0 })
                .collect(),
        );
    }
    let mut columns = Vec::with_capacity(width);
    for b in ["x", "xhat", "xcheck", "xhatcheck"] {
        for c in 0..d {
            columns.push(format!("{b}_{c}"));
        }
    }
    for c in 0..cl.k1 {
        columns.push(format!("u1_{c}"));
    }
    for c in 0..cl.k2 {
        columns.push(format!("u2_{c}"));
    }
    NodeSummary {
        t: cl.grid.nodes(),
        columns,
        mean,
        se,
    }
}
