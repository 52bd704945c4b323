//! Derived coefficients of the follower and leader problems and the
//! four-step linear-solve chain that expresses Z₁, Z₂, Z₃ through 𝒫₁…𝒫₄.
//!
//! Processes on the augmented 2n-dimensional state are handled as *level
//! vectors* `[F, H, C, HC]`: the coefficients multiplying X, X̂, X̌ and X̂̌.
//! The three filters act on level vectors by
//!
//! ```text
//! E_H [a, b, c, d]  = [0, a+b, 0, c+d]
//! E_C [a, b, c, d]  = [0, 0, a+c, b+d]
//! E_HC[a, b, c, d]  = [0, 0, 0, a+b+c+d]
//! ```

use crate::error::{Assumption, Error, Result};
use crate::game_model::{CidGame, GameSpec, MatPath, DEF_TOL};
use crate::linalg::{blkdiag, block2, eye, is_finite, lu_solve, lu_solve_cond, min_abs_eig_sym, zeros, Mat};

/// Condition-number ceiling for the step matrices.
pub const COND_MAX: f64 = 1e12;

/// Coefficients on (X, X̂, X̌, X̂̌).
pub type Level = [Mat; 4];

pub const F: usize = 0;
pub const H: usize = 1;
pub const C: usize = 2;
pub const HC: usize = 3;

pub fn level_zero(d: usize) -> Level {
    [zeros(d, d), zeros(d, d), zeros(d, d), zeros(d, d)]
}

pub fn e_h(v: &Level) -> Level {
    let z = zeros(v[0].nrows(), v[0].ncols());
    [z.clone(), &v[F] + &v[H], z.clone(), &v[C] + &v[HC]]
}

pub fn e_c(v: &Level) -> Level {
    let z = zeros(v[0].nrows(), v[0].ncols());
    [z.clone(), z.clone(), &v[F] + &v[C], &v[H] + &v[HC]]
}

pub fn e_hc(v: &Level) -> Level {
    let z = zeros(v[0].nrows(), v[0].ncols());
    [z.clone(), z.clone(), z, level_sum(v)]
}

/// Projection onto the filtration of slot `l` (F is the identity).
pub fn project(l: usize, v: &Level) -> Level {
    match l {
        F => v.clone(),
        H => e_h(v),
        C => e_c(v),
        _ => e_hc(v),
    }
}

pub fn level_sum(v: &Level) -> Mat {
    &v[F] + &v[H] + &v[C] + &v[HC]
}

/// `m · v`, slot by slot.
pub fn mul_level(m: &Mat, v: &Level) -> Level {
    [m * &v[0], m * &v[1], m * &v[2], m * &v[3]]
}

pub fn add_level(a: &Level, b: &Level) -> Level {
    [&a[0] + &b[0], &a[1] + &b[1], &a[2] + &b[2], &a[3] + &b[3]]
}

/// Σ_ℓ coef[ℓ] · E_ℓ(v): a process written as coefficients times filters.
pub fn apply(coef: &Level, v: &Level) -> Level {
    let mut out = mul_level(&coef[F], v);
    for l in [H, C, HC] {
        out = add_level(&out, &mul_level(&coef[l], &project(l, v)));
    }
    out
}

// ---------------------------------------------------------------------------
// Follower

/// Follower coefficients at one instant.
#[derive(Debug, Clone)]
pub struct FollowerCoeffs {
    pub nbar1: Mat,
    /// S₁ = P₁B₀ + Σ AᵢᵀP₁Bᵢ.
    pub s1: Mat,
    /// M = Σ BᵢᵀP₁Cᵢ.
    pub m: Mat,
    pub l0: Mat,
    pub l1: Mat,
    pub l3: Mat,
    pub l4: Mat,
}

fn nbar_check(nbar1: &Mat, t: f64, node: usize) -> Result<()> {
    if !is_finite(nbar1) || min_abs_eig_sym(nbar1) < DEF_TOL {
        return Err(Error::AssumptionViolated {
            t,
            node,
            which: Assumption::A21,
        });
    }
    Ok(())
}

/// N̄₁⁻¹·rhs by LU.
fn nbar_solve(nbar1: &Mat, rhs: &Mat, t: f64, node: usize) -> Result<Mat> {
    lu_solve(nbar1, rhs).ok_or(Error::AssumptionViolated {
        t,
        node,
        which: Assumption::A21,
    })
}

impl FollowerCoeffs {
    pub fn new(spec: &GameSpec, p1: &Mat, t: f64, node: usize) -> Result<Self> {
        let (a, b, c) = (&spec.a, &spec.b, &spec.c);
        let mut nbar1 = spec.n1.clone();
        let mut s1 = p1 * &b[0];
        let mut m = zeros(spec.k1, spec.k2);
        let mut l4 = p1 * &c[0];
        for i in 1..4 {
            nbar1 += b[i].transpose() * p1 * &b[i];
            s1 += a[i].transpose() * p1 * &b[i];
            m += b[i].transpose() * p1 * &c[i];
            l4 += a[i].transpose() * p1 * &c[i];
        }
        nbar_check(&nbar1, t, node)?;
        // N̄₁⁻¹ applied to [B₀ᵀ | B₁ᵀ | B₃ᵀ | M].
        let rhs = stack_cols(&[b[0].transpose(), b[1].transpose(), b[3].transpose(), m.clone()]);
        let sol = nbar_solve(&nbar1, &rhs, t, node)?;
        let n = spec.n;
        let w0 = sol.columns(0, n).into_owned();
        let w1 = sol.columns(n, n).into_owned();
        let w3 = sol.columns(2 * n, n).into_owned();
        let wm = sol.columns(3 * n, spec.k2).into_owned();
        let l0 = a[0].transpose() - &s1 * w0;
        let l1 = a[1].transpose() - &s1 * w1;
        let l3 = a[3].transpose() - &s1 * w3;
        l4 -= &s1 * wm;
        Ok(Self {
            nbar1,
            s1,
            m,
            l0,
            l1,
            l3,
            l4,
        })
    }
}

fn stack_cols(ms: &[Mat]) -> Mat {
    let r = ms[0].nrows();
    let c: usize = ms.iter().map(|m| m.ncols()).sum();
    let mut out = zeros(r, c);
    let mut off = 0;
    for m in ms {
        out.view_mut((0, off), m.shape()).copy_from(m);
        off += m.ncols();
    }
    out
}

fn stack_rows(ms: &[Mat]) -> Mat {
    let c = ms[0].ncols();
    let r: usize = ms.iter().map(|m| m.nrows()).sum();
    let mut out = zeros(r, c);
    let mut off = 0;
    for m in ms {
        out.view_mut((off, 0), m.shape()).copy_from(m);
        off += m.nrows();
    }
    out
}

/// Follower coefficients and the blocks of
/// u₁ = feedback_x·x̂ + feedback_phi·φ̂ + feedback_b1·β̂₁ + feedback_b3·β̂₃ + feedback_u2·û₂,
/// one entry per grid node.
///
/// The L-coefficients are given with the sign of the follower adjoint
/// equation: L₀ = S₁N̄₁⁻¹B₀ᵀ − A₀ᵀ, L_j = S₁N̄₁⁻¹B_jᵀ − A_jᵀ and
/// L₄ = S₁N̄₁⁻¹M − P₁C₀ − ΣAᵢᵀP₁Cᵢ, the negatives of [`FollowerCoeffs`].
#[derive(Debug, Clone)]
pub struct FollowerGains {
    pub l0: MatPath,
    pub l1: MatPath,
    pub l3: MatPath,
    pub l4: MatPath,
    pub nbar1: MatPath,
    pub feedback_x: MatPath,
    pub feedback_phi: MatPath,
    pub feedback_b1: MatPath,
    pub feedback_b3: MatPath,
    pub feedback_u2: MatPath,
}

pub fn build_follower_gains(spec: &GameSpec, p1: &MatPath) -> Result<FollowerGains> {
    let grid = p1.grid;
    let mut cols: [Vec<Mat>; 10] = Default::default();
    for (k, p) in p1.values.iter().enumerate() {
        let t = grid.t(k);
        let fc = FollowerCoeffs::new(spec, p, t, k)?;
        let rhs = stack_cols(&[
            fc.s1.transpose(),
            spec.b[0].transpose(),
            spec.b[1].transpose(),
            spec.b[3].transpose(),
            fc.m.clone(),
        ]);
        let sol = -nbar_solve(&fc.nbar1, &rhs, t, k)?;
        let n = spec.n;
        cols[5].push(sol.columns(0, n).into_owned());
        cols[6].push(sol.columns(n, n).into_owned());
        cols[7].push(sol.columns(2 * n, n).into_owned());
        cols[8].push(sol.columns(3 * n, n).into_owned());
        cols[9].push(sol.columns(4 * n, spec.k2).into_owned());
        cols[0].push(-fc.l0);
        cols[1].push(-fc.l1);
        cols[2].push(-fc.l3);
        cols[3].push(-fc.l4);
        cols[4].push(fc.nbar1);
    }
    let [l0, l1, l3, l4, nbar1, fx, fphi, fb1, fb3, fu2] = cols.map(|v| MatPath::new(grid, v));
    Ok(FollowerGains {
        l0,
        l1,
        l3,
        l4,
        nbar1,
        feedback_x: fx,
        feedback_phi: fphi,
        feedback_b1: fb1,
        feedback_b3: fb3,
        feedback_u2: fu2,
    })
}

// ---------------------------------------------------------------------------
// Leader blocks

/// Leader coefficients L_{j1}…L_{j5}, j = 0..3, at one instant.
#[derive(Debug, Clone)]
pub struct LeaderCoeffs {
    /// `l[j][k-1]` is L_{jk}.
    pub l: [[Mat; 5]; 4],
}

impl LeaderCoeffs {
    pub fn new(spec: &GameSpec, fc: &FollowerCoeffs, t: f64, node: usize) -> Result<Self> {
        let n = spec.n;
        let rhs = stack_cols(&[
            fc.s1.transpose(),
            spec.b[0].transpose(),
            spec.b[1].transpose(),
            spec.b[3].transpose(),
            fc.m.clone(),
        ]);
        let w = nbar_solve(&fc.nbar1, &rhs, t, node)?;
        let l = std::array::from_fn(|j| {
            let bw = -(&spec.b[j] * &w);
            [
                bw.columns(0, n).into_owned(),
                bw.columns(n, n).into_owned(),
                bw.columns(2 * n, n).into_owned(),
                bw.columns(3 * n, n).into_owned(),
                bw.columns(4 * n, spec.k2).into_owned(),
            ]
        });
        Ok(Self { l })
    }

    pub fn get(&self, j: usize, k: usize) -> &Mat {
        &self.l[j][k - 1]
    }
}

/// Every coefficient of the augmented leader FBSDE at one instant.
///
/// Index 0 of `dx`, `dy`, `dz` is the drift, 1..3 the diffusions along W₁…W₃.
/// Slot layout follows [`Level`]; `dz[i][j]` multiplies Z_{j+1}.
#[derive(Debug, Clone)]
pub struct LeaderBlocks {
    pub n: usize,
    pub coeffs: LeaderCoeffs,
    pub follower: FollowerCoeffs,
    pub dx: [Level; 4],
    pub dy: [Level; 4],
    pub dz: [[Level; 3]; 4],
    pub fx: Level,
    pub fy: Level,
    pub fz: [Level; 3],
    pub q2: Mat,
    pub g2: Mat,
    /// ℒ₄ = (0; L₄).
    pub l4: Mat,
    /// 𝒞_{i5} = (Cᵢ; 0).
    pub c5: [Mat; 4],
    /// ℒ_{i5} = (L_{i5}; 0).
    pub l5: [Mat; 4],
    pub n2: Mat,
    /// X₀ = (x₀; 0).
    pub x0: Mat,
}

impl LeaderBlocks {
    pub fn new(spec: &GameSpec, p1: &Mat, t: f64, node: usize) -> Result<Self> {
        let n = spec.n;
        let d = 2 * n;
        let fc = FollowerCoeffs::new(spec, p1, t, node)?;
        let lc = LeaderCoeffs::new(spec, &fc, t, node)?;
        let l = |j: usize, k: usize| lc.get(j, k).clone();
        let zn = zeros(n, n);
        let zd = zeros(d, d);
        let c = &spec.c;
        let n2 = &spec.n2;
        let n2_inv = |m: &Mat| lu_solve(n2, m).expect("N2 validated positive definite");

        // V_ij = −CᵢN₂⁻¹Cⱼᵀ, W_ij = −CᵢN₂⁻¹L_{j5}ᵀ − L_{i5}N₂⁻¹(Cⱼ+L_{j5})ᵀ.
        let v = |i: usize, j: usize| -(&c[i] * n2_inv(&c[j].transpose()));
        let w = |i: usize, j: usize| {
            let cj = &c[j] + l(j, 5);
            -(&c[i] * n2_inv(&l(j, 5).transpose())) - l(i, 5) * n2_inv(&cj.transpose())
        };
        // U_i = −(Cᵢ+L_{i5})N₂⁻¹L₄ᵀ.
        let u = |i: usize| -((&c[i] + l(i, 5)) * n2_inv(&fc.l4.transpose()));

        let l_i = |i: usize| match i {
            0 => fc.l0.clone(),
            1 => fc.l1.clone(),
            2 => zn.clone(),
            _ => fc.l3.clone(),
        };
        let a_cal: [Mat; 4] = std::array::from_fn(|i| blkdiag(&spec.a[i], &l_i(i).transpose()));
        let a_hat: [Mat; 4] = std::array::from_fn(|i| blkdiag(&l(i, 1), &zn));
        let a_bar: [Mat; 4] = std::array::from_fn(|i| block2(&zn, &u(i), &zn, &zn));

        // Lower-left block of the Y coefficient of each equation.
        let s_i = |i: usize| match i {
            0 => l(0, 2).transpose(),
            1 => l(0, 3).transpose(),
            2 => zn.clone(),
            _ => l(0, 4).transpose(),
        };
        let dx = std::array::from_fn(|i| [a_cal[i].clone(), a_hat[i].clone(), zd.clone(), a_bar[i].clone()]);
        let dy = std::array::from_fn(|i| {
            [
                block2(&zn, &l(i, 2), &s_i(i), &zn),
                zd.clone(),
                blkdiag(&v(i, 0), &zn),
                blkdiag(&w(i, 0), &zn),
            ]
        });
        let dz = std::array::from_fn(|i| {
            std::array::from_fn(|jj| {
                let j = jj + 1;
                let top = match j {
                    1 => l(i, 3),
                    2 => zn.clone(),
                    _ => l(i, 4),
                };
                let low = match i {
                    0 => l(j, 2).transpose(),
                    1 => l(j, 3).transpose(),
                    2 => zn.clone(),
                    _ => l(j, 4).transpose(),
                };
                [
                    block2(&zn, &top, &low, &zn),
                    zd.clone(),
                    blkdiag(&v(i, j), &zn),
                    blkdiag(&w(i, j), &zn),
                ]
            })
        });
        let q2 = blkdiag(&spec.q2, &zn);
        let h1 = blkdiag(&zn, &(-(&fc.l4 * n2_inv(&fc.l4.transpose()))));
        let fx = [q2.clone(), zd.clone(), zd.clone(), h1];
        let fy = [
            a_cal[0].transpose(),
            a_hat[0].transpose(),
            zd.clone(),
            a_bar[0].transpose(),
        ];
        let fz = std::array::from_fn(|jj| {
            let j = jj + 1;
            [
                a_cal[j].transpose(),
                a_hat[j].transpose(),
                zd.clone(),
                a_bar[j].transpose(),
            ]
        });
        let zk = zeros(n, spec.k2);
        let l4 = stack_rows(&[zk.clone(), fc.l4.clone()]);
        let c5 = std::array::from_fn(|i| stack_rows(&[c[i].clone(), zk.clone()]));
        let l5 = std::array::from_fn(|i| stack_rows(&[l(i, 5), zk.clone()]));
        let mut x0 = zeros(d, 1);
        for r in 0..n {
            x0[(r, 0)] = spec.x0[r];
        }
        Ok(Self {
            n,
            coeffs: lc,
            follower: fc,
            dx,
            dy,
            dz,
            fx,
            fy,
            fz,
            q2,
            g2: blkdiag(&spec.g2, &zn),
            l4,
            c5,
            l5,
            n2: spec.n2.clone(),
            x0,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Blocks under their conventional names.
    pub fn named(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = Vec::new();
        let mut push = |name: String, m: &Mat| out.push((name, m.clone()));
        let zt = ["Z1", "Z2", "Z3"];
        let fam = ["C", "D", "E"];
        for i in 0..4 {
            push(format!("A{i}"), &self.dx[i][F]);
            push(format!("A{i}_hat"), &self.dx[i][H]);
            push(format!("A{i}_bar"), &self.dx[i][HC]);
        }
        push("B0".into(), &self.dy[0][F]);
        push("C0".into(), &self.dy[0][C]);
        push("C0_tilde".into(), &self.dy[0][HC]);
        for j in 0..3 {
            push(format!("B{}^T", j + 1), &self.dz[0][j][F]);
            push(format!("B{}_tilde^T", j + 1), &self.dz[0][j][C]);
            push(format!("{}0_bar", fam[j]), &self.dz[0][j][HC]);
        }
        for i in 1..4 {
            push(format!("B{i}"), &self.dy[i][F]);
            push(format!("B{i}_tilde"), &self.dy[i][C]);
            push(format!("B{i}_bar"), &self.dy[i][HC]);
            for j in 0..3 {
                push(format!("{}{i}", fam[j]), &self.dz[i][j][F]);
                push(format!("{}{i}_tilde", fam[j]), &self.dz[i][j][C]);
                push(format!("{}{i}_bar", fam[j]), &self.dz[i][j][HC]);
            }
        }
        push("Q2".into(), &self.q2);
        push("G2".into(), &self.g2);
        push("H1".into(), &self.fx[HC]);
        push("H2".into(), &self.fy[H]);
        for j in 0..3 {
            push(format!("driver_{}_hat", zt[j]), &self.fz[j][H]);
        }
        push("L4_cal".into(), &self.l4);
        for i in 0..4 {
            push(format!("C{i}5"), &self.c5[i]);
            push(format!("L{i}5_cal"), &self.l5[i]);
        }
        push("X0".into(), &self.x0);
        for j in 0..4 {
            for k in 1..=5 {
                push(format!("L{j}{k}"), self.coeffs.get(j, k));
            }
        }
        out
    }
}

/// Leader blocks at every node of a follower solution.
pub fn build_leader_blocks(spec: &GameSpec, p1: &MatPath) -> Result<Vec<LeaderBlocks>> {
    p1.values
        .iter()
        .enumerate()
        .map(|(k, p)| LeaderBlocks::new(spec, p, p1.grid.t(k), k))
        .collect()
}

// ---------------------------------------------------------------------------
// Σ-chain

/// Output of the four-step chain at one instant. Index i = 0, 1, 2 refers to
/// Z₁, Z₂, Z₃.
#[derive(Debug, Clone)]
pub struct SigmaSet {
    /// 𝒩ᵢ = Σᵢ + Σ̂ᵢ + Σ̃ᵢ + Σ̄ᵢ (Step 1).
    pub n_cal: [Mat; 3],
    /// Ñᵢ = Σᵢ + Σ̃ᵢ and N̄ᵢ = Σ̂ᵢ + Σ̄ᵢ (Step 2).
    pub n_tilde: [Mat; 3],
    pub n_bar: [Mat; 3],
    /// N̂ᵢ = Σᵢ + Σ̂ᵢ and N̿ᵢ = Σ̃ᵢ + Σ̄ᵢ (Step 3).
    pub n_hat: [Mat; 3],
    pub n_dbar: [Mat; 3],
    /// (Σᵢ, Σ̂ᵢ, Σ̃ᵢ, Σ̄ᵢ) (Step 4).
    pub sigma: [Level; 3],
    /// ∞-norm condition numbers of the Step 1…4 matrices.
    pub cond: [f64; 4],
}

/// Coefficient matrix `I − [m_ij]` of a 3×3 block system.
pub fn step_matrix(m: &[[Mat; 3]; 3]) -> Mat {
    let d = m[0][0].nrows();
    let mut out = eye(3 * d);
    for i in 0..3 {
        for j in 0..3 {
            let mut v = out.view_mut((i * d, j * d), (d, d));
            v -= &m[i][j];
        }
    }
    out
}

fn solve_step(
    m: &[[Mat; 3]; 3],
    rhs: &[&[Mat; 3]],
    which: Assumption,
    t: f64,
    node: usize,
) -> Result<(Vec<[Mat; 3]>, f64)> {
    let a = step_matrix(m);
    let d = m[0][0].nrows();
    let b = stack_cols(&rhs.iter().map(|r| stack_rows(r.as_slice())).collect::<Vec<_>>());
    let fail = Error::AssumptionViolated { t, node, which };
    let (x, cond) = lu_solve_cond(&a, &b).ok_or(fail.clone())?;
    if !cond.is_finite() || cond > COND_MAX || !is_finite(&x) {
        return Err(fail);
    }
    let out = (0..rhs.len())
        .map(|r| std::array::from_fn(|i| x.view((i * d, r * d), (d, d)).into_owned()))
        .collect();
    Ok((out, cond))
}

/// Weights (P_F, P_H, P_C, P_HC) with which Zᵢ inherits the X, X̂, X̌, X̂̌
/// diffusions: X̂ is driven by W₁, W₃; X̌ by W₂, W₃; X̂̌ by W₃.
fn weights(p: &Level, i: usize) -> Level {
    let z = zeros(p[0].nrows(), p[0].ncols());
    let w = i + 1;
    [
        p[F].clone(),
        if w == 1 || w == 3 { p[H].clone() } else { z.clone() },
        if w == 2 || w == 3 { p[C].clone() } else { z.clone() },
        if w == 3 { p[HC].clone() } else { z },
    ]
}

/// Runs Steps 1–4 at one instant for the level vector `p` = (𝒫₁, 𝒫₂, 𝒫₃, 𝒫₄).
pub fn compute_sigma_chain(b: &LeaderBlocks, p: &Level, t: f64, node: usize) -> Result<SigmaSet> {
    let s = level_sum(p);
    let p13 = &p[F] + &p[C];
    let p24 = &p[H] + &p[HC];
    let p12 = &p[F] + &p[H];
    let p34 = &p[C] + &p[HC];
    let dx = |i: usize| &b.dx[i + 1];
    let dy = |i: usize| &b.dy[i + 1];
    let dz = |i: usize, j: usize| &b.dz[i + 1][j];
    let w: [Level; 3] = std::array::from_fn(|i| weights(p, i));

    // Step 1: common projection.
    let m1: [[Mat; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| level_sum(&w[i]) * level_sum(dz(i, j))));
    let r1: [Mat; 3] = std::array::from_fn(|i| level_sum(&w[i]) * (level_sum(dx(i)) + level_sum(dy(i)) * &s));
    let (sol, c1) = solve_step(&m1, &[&r1], Assumption::A22, t, node)?;
    let n_cal = sol[0].clone();
    // Sum of the diffusion level vector of X along Wᵢ.
    let dhc: [Mat; 3] = std::array::from_fn(|i| {
        let mut acc = level_sum(dx(i)) + level_sum(dy(i)) * &s;
        for j in 0..3 {
            acc += level_sum(dz(i, j)) * &n_cal[j];
        }
        acc
    });

    // Step 2: leader projection.
    let pc: [Mat; 3] = std::array::from_fn(|i| &w[i][F] + &w[i][C]);
    let ph_hc: [Mat; 3] = std::array::from_fn(|i| &w[i][H] + &w[i][HC]);
    let m2: [[Mat; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| &pc[i] * (&dz(i, j)[F] + &dz(i, j)[C])));
    let rt: [Mat; 3] = std::array::from_fn(|i| &pc[i] * (&dx(i)[F] + &dx(i)[C] + (&dy(i)[F] + &dy(i)[C]) * &p13));
    let rb: [Mat; 3] = std::array::from_fn(|i| {
        let mut acc = &dx(i)[H] + &dx(i)[HC] + (&dy(i)[F] + &dy(i)[C]) * &p24 + (&dy(i)[H] + &dy(i)[HC]) * &s;
        for j in 0..3 {
            acc += (&dz(i, j)[H] + &dz(i, j)[HC]) * &n_cal[j];
        }
        &pc[i] * acc + &ph_hc[i] * &dhc[i]
    });
    let (sol, c2) = solve_step(&m2, &[&rt, &rb], Assumption::A23, t, node)?;
    let (n_tilde, n_bar) = (sol[0].clone(), sol[1].clone());

    // Step 3: follower projection.
    let ph: [Mat; 3] = std::array::from_fn(|i| &w[i][F] + &w[i][H]);
    let pc_hc: [Mat; 3] = std::array::from_fn(|i| &w[i][C] + &w[i][HC]);
    let m3: [[Mat; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| &ph[i] * (&dz(i, j)[F] + &dz(i, j)[H])));
    let rh: [Mat; 3] = std::array::from_fn(|i| &ph[i] * (&dx(i)[F] + &dx(i)[H] + (&dy(i)[F] + &dy(i)[H]) * &p12));
    let rdb: [Mat; 3] = std::array::from_fn(|i| {
        let mut acc = &dx(i)[C] + &dx(i)[HC] + (&dy(i)[F] + &dy(i)[H]) * &p34 + (&dy(i)[C] + &dy(i)[HC]) * &s;
        for j in 0..3 {
            acc += (&dz(i, j)[C] + &dz(i, j)[HC]) * &n_cal[j];
        }
        &ph[i] * acc + &pc_hc[i] * &dhc[i]
    });
    let (sol, c3) = solve_step(&m3, &[&rh, &rdb], Assumption::A24, t, node)?;
    let (n_hat, n_dbar) = (sol[0].clone(), sol[1].clone());

    // Step 4: full information.
    let p1 = &p[F];
    let m4: [[Mat; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| p1 * &dz(i, j)[F]));
    let sum_j = |i: usize, slot: usize, v: &[Mat; 3]| {
        let mut acc = zeros(p1.nrows(), p1.ncols());
        for j in 0..3 {
            acc += &dz(i, j)[slot] * &v[j];
        }
        acc
    };
    // Components of E_H(Dᵢ) and E_C(Dᵢ), all known after Steps 1–3.
    let eh_h =
        |i: usize| &dx(i)[F] + &dx(i)[H] + (&dy(i)[F] + &dy(i)[H]) * &p12 + sum_j(i, F, &n_hat) + sum_j(i, H, &n_hat);
    let ec_c = |i: usize| {
        &dx(i)[F] + &dx(i)[C] + (&dy(i)[F] + &dy(i)[C]) * &p13 + sum_j(i, F, &n_tilde) + sum_j(i, C, &n_tilde)
    };
    let eh_hc = |i: usize| {
        &dx(i)[C]
            + &dx(i)[HC]
            + (&dy(i)[F] + &dy(i)[H]) * &p34
            + (&dy(i)[C] + &dy(i)[HC]) * &s
            + sum_j(i, F, &n_dbar)
            + sum_j(i, H, &n_dbar)
            + sum_j(i, C, &n_cal)
            + sum_j(i, HC, &n_cal)
    };
    let ec_hc = |i: usize| {
        &dx(i)[H]
            + &dx(i)[HC]
            + (&dy(i)[F] + &dy(i)[C]) * &p24
            + (&dy(i)[H] + &dy(i)[HC]) * &s
            + sum_j(i, F, &n_bar)
            + sum_j(i, C, &n_bar)
            + sum_j(i, H, &n_cal)
            + sum_j(i, HC, &n_cal)
    };
    let rs: [Mat; 3] = std::array::from_fn(|i| p1 * (&dx(i)[F] + &dy(i)[F] * p1));
    let rsh: [Mat; 3] = std::array::from_fn(|i| {
        p1 * (&dx(i)[H] + &dy(i)[F] * &p[H] + &dy(i)[H] * &p12 + sum_j(i, H, &n_hat)) + &w[i][H] * eh_h(i)
    });
    let rst: [Mat; 3] = std::array::from_fn(|i| {
        p1 * (&dx(i)[C] + &dy(i)[F] * &p[C] + &dy(i)[C] * &p13 + sum_j(i, C, &n_tilde)) + &w[i][C] * ec_c(i)
    });
    let rsb: [Mat; 3] = std::array::from_fn(|i| {
        let inner = &dx(i)[HC]
            + &dy(i)[F] * &p[HC]
            + &dy(i)[H] * &p34
            + &dy(i)[C] * &p24
            + &dy(i)[HC] * &s
            + sum_j(i, H, &n_dbar)
            + sum_j(i, C, &n_bar)
            + sum_j(i, HC, &n_cal);
        p1 * inner + &w[i][H] * eh_hc(i) + &w[i][C] * ec_hc(i) + &w[i][HC] * &dhc[i]
    });
    let (sol, c4) = solve_step(&m4, &[&rs, &rsh, &rst, &rsb], Assumption::A25, t, node)?;
    let sigma = std::array::from_fn(|i| {
        [
            sol[0][i].clone(),
            sol[1][i].clone(),
            sol[2][i].clone(),
            sol[3][i].clone(),
        ]
    });
    Ok(SigmaSet {
        n_cal,
        n_tilde,
        n_bar,
        n_hat,
        n_dbar,
        sigma,
        cond: [c1, c2, c3, c4],
    })
}

/// Drift R and driver f of the decoupled leader FBSDE as level vectors.
pub fn drift_and_driver(b: &LeaderBlocks, p: &Level, sig: &SigmaSet) -> (Level, Level) {
    let d = b.dim();
    let xv: Level = [eye(d), zeros(d, d), zeros(d, d), zeros(d, d)];
    let mut r = add_level(&apply(&b.dx[0], &xv), &apply(&b.dy[0], p));
    let mut f = add_level(&apply(&b.fx, &xv), &apply(&b.fy, p));
    for j in 0..3 {
        r = add_level(&r, &apply(&b.dz[0][j], &sig.sigma[j]));
        f = add_level(&f, &apply(&b.fz[j], &sig.sigma[j]));
    }
    (r, f)
}

/// Right-hand side (𝒫̇₁, 𝒫̇₂, 𝒫̇₃, 𝒫̇₄) = −(𝒫₁R + 𝒫₂E_H R + 𝒫₃E_C R + 𝒫₄E_HC R + f).
pub fn riccati_level_rhs(p: &Level, r: &Level, f: &Level) -> Level {
    let mut acc = add_level(&mul_level(&p[F], r), f);
    acc = add_level(&acc, &mul_level(&p[H], &e_h(r)));
    acc = add_level(&acc, &mul_level(&p[C], &e_c(r)));
    acc = add_level(&acc, &mul_level(&p[HC], &e_hc(r)));
    acc.map(|m| -m)
}

/// Leader feedback u₂ = G_check·X̌ + G_cross·X̂̌ from the Σ-chain output.
pub fn general_leader_gains(b: &LeaderBlocks, p: &Level, sig: &SigmaSet) -> Result<(Mat, Mat)> {
    let s = level_sum(p);
    let mut check = b.c5[0].transpose() * (&p[F] + &p[C]);
    let mut cross = b.l4.transpose() + b.c5[0].transpose() * (&p[H] + &p[HC]) + b.l5[0].transpose() * &s;
    for j in 0..3 {
        check += b.c5[j + 1].transpose() * &sig.n_tilde[j];
        cross += b.c5[j + 1].transpose() * &sig.n_bar[j] + b.l5[j + 1].transpose() * &sig.n_cal[j];
    }
    let g_check = -lu_solve(&b.n2, &check).ok_or_else(|| Error::Invalid("N2 singular".into()))?;
    let g_cross = -lu_solve(&b.n2, &cross).ok_or_else(|| Error::Invalid("N2 singular".into()))?;
    Ok((g_check, g_cross))
}

// ---------------------------------------------------------------------------
// Control-independent diffusions

/// Closed-form blocks of the control-independent-diffusion case, in the
/// 2n×2n augmented layout, at one value of the follower solution P.
#[derive(Debug, Clone)]
pub struct CidBlocks {
    pub a0: Mat,
    pub bbar0: Mat,
    pub b0: Mat,
    pub c0: Mat,
    pub c0_tilde: Mat,
    pub c0_hat: Mat,
    pub c0_bar: Mat,
    /// 𝒜₁, 𝒜₂, 𝒜₃.
    pub a: [Mat; 3],
    pub q2: Mat,
    pub g2: Mat,
}

impl CidBlocks {
    pub fn new(g: &CidGame, p: &Mat) -> Result<Self> {
        let zn = zeros(g.n, g.n);
        let k1 = &g.b0 * lu_solve(&g.n1, &g.b0.transpose()).ok_or_else(|| Error::Invalid("N1 singular".into()))?;
        let k2 = &g.c0 * lu_solve(&g.n2, &g.c0.transpose()).ok_or_else(|| Error::Invalid("N2 singular".into()))?;
        let k1p = &k1 * p;
        let k2p = &k2 * p;
        let c0_tilde = block2(&zn, &(-&k2p), &zn, &zn);
        Ok(Self {
            a0: blkdiag(&g.a[0], &(&g.a[0] - &k1p)),
            bbar0: blkdiag(&(-&k1p), &zn),
            b0: block2(&zn, &(-&k1), &(-k1.transpose()), &zn),
            c0: blkdiag(&(-&k2), &zn),
            c0_hat: c0_tilde.transpose(),
            c0_tilde,
            c0_bar: blkdiag(&zn, &(-(p * &k2p))),
            a: [
                blkdiag(&g.a[1], &g.a[1]),
                blkdiag(&g.a[2], &zn),
                blkdiag(&g.a[3], &g.a[3]),
            ],
            q2: blkdiag(&g.q2, &zn),
            g2: blkdiag(&g.g2, &zn),
        })
    }
}

/// Drift slots R and driver slots f of the closed loop for given 𝒫₁…𝒫₄.
#[derive(Debug, Clone)]
pub struct CidSlots {
    pub r: Level,
    pub f: Level,
}

impl CidSlots {
    pub fn new(b: &CidBlocks, p: &Level) -> Self {
        let [p1, p2, p3, p4] = p;
        let s = level_sum(p);
        let r = [
            &b.a0 + &b.b0 * p1,
            &b.bbar0 + &b.b0 * p2,
            &b.b0 * p3 + &b.c0 * (p1 + p3),
            &b.c0_tilde + &b.b0 * p4 + &b.c0 * (p2 + p4),
        ];
        let a0t = b.a0.transpose();
        let bb0t = b.bbar0.transpose();
        let at: [Mat; 3] = std::array::from_fn(|i| b.a[i].transpose());
        let mut f_f = &b.q2 + &a0t * p1;
        for i in 0..3 {
            f_f += &at[i] * p1 * &b.a[i];
        }
        let f_h = &a0t * p2 + &bb0t * (p1 + p2) + &at[0] * p2 * &b.a[0] + &at[2] * p2 * &b.a[2];
        let f_c = &a0t * p3 + &at[1] * p3 * &b.a[1] + &at[2] * p3 * &b.a[2];
        let f_hc = &b.c0_bar + &a0t * p4 + &bb0t * (p3 + p4) + &b.c0_hat * &s + &at[2] * p4 * &b.a[2];
        Self {
            r,
            f: [f_f, f_h, f_c, f_hc],
        }
    }

    /// (𝒫̇₁, 𝒫̇₂, 𝒫̇₃, 𝒫̇₄). 𝒫̇₂ and 𝒫̇₃ never read 𝒫₃/𝒫₄ and 𝒫₂/𝒫₄ respectively.
    pub fn rhs(&self, p: &Level) -> Level {
        let [p1, p2, p3, p4] = p;
        let [rf, rh, rc, rhc] = &self.r;
        let [ff, fh, fc, fhc] = &self.f;
        let rsum = rf + rh + rc + rhc;
        [
            -(p1 * rf + ff),
            -(p1 * rh + p2 * (rf + rh) + fh),
            -(p1 * rc + p3 * (rf + rc) + fc),
            -(p1 * rhc + p2 * (rc + rhc) + p3 * (rh + rhc) + p4 * rsum + fhc),
        ]
    }
}
