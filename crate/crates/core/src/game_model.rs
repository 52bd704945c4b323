//! Game data: coefficient sets, time grids, matrix paths and validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eig_sym, Mat, Vector};

/// Definiteness tolerance on eigenvalues.
pub const DEF_TOL: f64 = 1e-10;
/// Largest accepted asymmetry of weight matrices.
pub const SYM_TOL: f64 = 1e-12;

/// Uniform grid t_k = k·T/n_steps on [0, T].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps < 2 {
            return Err(Error::Invalid(format!("n_steps must be >= 2, got {n_steps}")));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }
}

/// One matrix per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatPath {
    pub grid: TimeGrid,
    pub values: Vec<Mat>,
}

impl MatPath {
    pub fn new(grid: TimeGrid, values: Vec<Mat>) -> Self {
        debug_assert_eq!(values.len(), grid.n_steps + 1);
        Self { grid, values }
    }

    pub fn constant(grid: TimeGrid, m: &Mat) -> Self {
        Self::new(grid, vec![m.clone(); grid.n_steps + 1])
    }

    pub fn at(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// Linear interpolation between nodes, clamped to [0, T].
    pub fn interp(&self, t: f64) -> Mat {
        let h = self.grid.h();
        let s = (t / h).clamp(0.0, self.grid.n_steps as f64);
        let k = (s.floor() as usize).min(self.grid.n_steps - 1);
        let w = s - k as f64;
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(crate::linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(&Mat) -> Mat) -> Self {
        Self::new(self.grid, self.values.iter().map(f).collect())
    }
}

/// Which Brownian components a σ-algebra is generated by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observed(pub [bool; 3]);

impl Observed {
    pub const FOLLOWER: Observed = Observed([true, false, true]);
    pub const LEADER: Observed = Observed([false, true, true]);
    pub const COMMON: Observed = Observed([false, false, true]);
    pub const ALL: Observed = Observed([true, true, true]);

    pub fn sees(&self, i: usize) -> bool {
        self.0[i]
    }
}

/// Information available to each player.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoPattern {
    pub follower_observes: Observed,
    pub leader_observes: Observed,
}

impl InfoPattern {
    /// Follower sees (W1, W3), leader sees (W2, W3).
    pub const CANONICAL: InfoPattern = InfoPattern {
        follower_observes: Observed::FOLLOWER,
        leader_observes: Observed::LEADER,
    };
    pub const FULL: InfoPattern = InfoPattern {
        follower_observes: Observed::ALL,
        leader_observes: Observed::ALL,
    };

    pub fn common(&self) -> Observed {
        let f = self.follower_observes.0;
        let l = self.leader_observes.0;
        Observed([f[0] && l[0], f[1] && l[1], f[2] && l[2]])
    }
}

/// Constant-coefficient game
/// dx = [A₀x + B₀u₁ + C₀u₂]dt + Σᵢ [Aᵢx + Bᵢu₁ + Cᵢu₂]dWᵢ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    #[serde(with = "crate::mat_json::array4")]
    pub a: [Mat; 4],
    #[serde(with = "crate::mat_json::array4")]
    pub b: [Mat; 4],
    #[serde(with = "crate::mat_json::array4")]
    pub c: [Mat; 4],
    #[serde(with = "crate::mat_json::mat")]
    pub q1: Mat,
    #[serde(with = "crate::mat_json::mat")]
    pub n1: Mat,
    #[serde(with = "crate::mat_json::mat")]
    pub g1: Mat,
    #[serde(with = "crate::mat_json::mat")]
    pub q2: Mat,
    #[serde(with = "crate::mat_json::mat")]
    pub n2: Mat,
    #[serde(with = "crate::mat_json::mat")]
    pub g2: Mat,
    #[serde(with = "crate::mat_json::vector")]
    pub x0: Vector,
}

/// Scalar game with control-independent diffusions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CidSpec {
    pub A0: f64,
    pub A1: f64,
    pub A2: f64,
    pub A3: f64,
    pub B0: f64,
    pub C0: f64,
    pub Q1: f64,
    pub N1: f64,
    pub G1: f64,
    pub Q2: f64,
    pub N2: f64,
    pub G2: f64,
    pub x0: f64,
}

impl CidSpec {
    /// A0 = 0.1, A1 = A2 = A3 = 0.2, B0 = C0 = 1, unit weights, x0 = 1.
    pub fn generic() -> Self {
        Self {
            A0: 0.1,
            A1: 0.2,
            A2: 0.2,
            A3: 0.2,
            B0: 1.0,
            C0: 1.0,
            Q1: 1.0,
            N1: 1.0,
            G1: 1.0,
            Q2: 1.0,
            N2: 1.0,
            G2: 1.0,
            x0: 1.0,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let all = [
            self.A0, self.A1, self.A2, self.A3, self.B0, self.C0, self.Q1, self.N1, self.G1, self.Q2, self.N2, self.G2,
            self.x0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            issues.push("non-finite coefficient".to_string());
        }
        for (name, v) in [("Q1", self.Q1), ("G1", self.G1), ("Q2", self.Q2), ("G2", self.G2)] {
            if v < -DEF_TOL {
                issues.push(format!("{name} not nonnegative"));
            }
        }
        if self.N1 == 0.0 {
            issues.push("N1 must be nonzero".to_string());
        }
        if self.N2 == 0.0 {
            issues.push("N2 not positive definite".to_string());
        }
        ValidationReport { issues }
    }
}

/// Result of a validation pass; empty means valid.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.issues.iter().any(|s| s.contains(needle))
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Invalid(self.issues.join("; ")))
        }
    }
}

fn check_shape(issues: &mut Vec<String>, name: &str, m: &Mat, r: usize, c: usize) -> bool {
    if m.shape() != (r, c) {
        issues.push(format!(
            "dimension mismatch: {name} is {}x{}, expected {r}x{c}",
            m.nrows(),
            m.ncols()
        ));
        false
    } else {
        true
    }
}

/// Lists every violated invariant of `spec`.
pub fn validate_spec(spec: &GameSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    if n == 0 || k1 == 0 || k2 == 0 {
        issues.push("dimensions must be positive".to_string());
    }
    for i in 0..4 {
        check_shape(&mut issues, &format!("A{i}"), &spec.a[i], n, n);
        check_shape(&mut issues, &format!("B{i}"), &spec.b[i], n, k1);
        check_shape(&mut issues, &format!("C{i}"), &spec.c[i], n, k2);
    }
    if spec.x0.len() != n {
        issues.push(format!(
            "dimension mismatch: x0 has length {}, expected {n}",
            spec.x0.len()
        ));
    }
    let weights = [
        ("Q1", &spec.q1, n, false),
        ("G1", &spec.g1, n, false),
        ("Q2", &spec.q2, n, false),
        ("G2", &spec.g2, n, false),
        ("N1", &spec.n1, k1, false),
        ("N2", &spec.n2, k2, true),
    ];
    for (name, m, d, strict) in weights {
        if !check_shape(&mut issues, name, m, d, d) {
            continue;
        }
        if m.iter().any(|v| !v.is_finite()) {
            issues.push(format!("{name} has non-finite entries"));
            continue;
        }
        if asymmetry(m) > SYM_TOL {
            issues.push(format!("{name} not symmetric"));
            continue;
        }
        let lo = min_eig_sym(m);
        if strict && lo < DEF_TOL {
            issues.push(format!("{name} not positive definite"));
        } else if !strict && lo < -DEF_TOL {
            issues.push(format!("{name} not nonnegative definite"));
        }
    }
    let coeffs = spec.a.iter().chain(spec.b.iter()).chain(spec.c.iter());
    if coeffs.clone().any(|m| m.iter().any(|v| !v.is_finite())) || spec.x0.iter().any(|v| !v.is_finite()) {
        issues.push("non-finite coefficient".to_string());
    }
    ValidationReport { issues }
}

/// Embeds a scalar control-independent-diffusion game as a 1-dimensional [`GameSpec`].
pub fn embed_cid(s: &CidSpec) -> GameSpec {
    let m = |v: f64| Mat::from_element(1, 1, v);
    let z = m(0.0);
    GameSpec {
        n: 1,
        k1: 1,
        k2: 1,
        a: [m(s.A0), m(s.A1), m(s.A2), m(s.A3)],
        b: [m(s.B0), z.clone(), z.clone(), z.clone()],
        c: [m(s.C0), z.clone(), z.clone(), z],
        q1: m(s.Q1),
        n1: m(s.N1),
        g1: m(s.G1),
        q2: m(s.Q2),
        n2: m(s.N2),
        g2: m(s.G2),
        x0: Vector::from_element(1, s.x0),
    }
}

/// Game with control-independent diffusions in matrix form:
/// dx = [A₀x + B₀u₁ + C₀u₂]dt + Σᵢ [Aᵢx + σᵢ]dWᵢ.
///
/// Covers the scalar [`CidSpec`] (σ = 0) and the principal-agent game
/// (Aᵢ = 0 for i ≥ 1, additive σ).
#[derive(Debug, Clone, PartialEq)]
pub struct CidGame {
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    /// A₀…A₃.
    pub a: [Mat; 4],
    pub b0: Mat,
    pub c0: Mat,
    pub q1: Mat,
    pub n1: Mat,
    pub g1: Mat,
    pub q2: Mat,
    pub n2: Mat,
    pub g2: Mat,
    /// Additive noise σ₁…σ₃ of the state.
    pub sigma: [Vector; 3],
    pub x0: Vector,
}

impl From<&CidSpec> for CidGame {
    fn from(s: &CidSpec) -> Self {
        let m = |v: f64| Mat::from_element(1, 1, v);
        let z = Vector::zeros(1);
        CidGame {
            n: 1,
            k1: 1,
            k2: 1,
            a: [m(s.A0), m(s.A1), m(s.A2), m(s.A3)],
            b0: m(s.B0),
            c0: m(s.C0),
            q1: m(s.Q1),
            n1: m(s.N1),
            g1: m(s.G1),
            q2: m(s.Q2),
            n2: m(s.N2),
            g2: m(s.G2),
            sigma: [z.clone(), z.clone(), z],
            x0: Vector::from_element(1, s.x0),
        }
    }
}

impl CidGame {
    /// Structural checks. N₁ and N₂ need only be invertible here.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let (n, k1, k2) = (self.n, self.k1, self.k2);
        for i in 0..4 {
            check_shape(&mut issues, &format!("A{i}"), &self.a[i], n, n);
        }
        check_shape(&mut issues, "B0", &self.b0, n, k1);
        check_shape(&mut issues, "C0", &self.c0, n, k2);
        for (name, m, d) in [
            ("Q1", &self.q1, n),
            ("G1", &self.g1, n),
            ("Q2", &self.q2, n),
            ("G2", &self.g2, n),
            ("N1", &self.n1, k1),
            ("N2", &self.n2, k2),
        ] {
            if check_shape(&mut issues, name, m, d, d) && asymmetry(m) > SYM_TOL {
                issues.push(format!("{name} not symmetric"));
            }
        }
        for (name, m) in [("N1", &self.n1), ("N2", &self.n2)] {
            if m.is_square() && crate::linalg::min_abs_eig_sym(m) < DEF_TOL {
                issues.push(format!("{name} not invertible"));
            }
        }
        for i in 0..3 {
            if self.sigma[i].len() != n {
                issues.push(format!("dimension mismatch: sigma{} has wrong length", i + 1));
            } else if self.sigma[i].iter().any(|v| *v != 0.0) && self.a[i + 1].iter().any(|v| *v != 0.0) {
                issues.push(format!(
                    "A{} and sigma{} both nonzero: affine term not supported",
                    i + 1,
                    i + 1
                ));
            }
        }
        if self.x0.len() != n {
            issues.push("dimension mismatch: x0".to_string());
        }
        ValidationReport { issues }
    }

    /// The same game as a [`GameSpec`] (additive noise dropped).
    pub fn to_game_spec(&self) -> GameSpec {
        let zb = Mat::zeros(self.n, self.k1);
        let zc = Mat::zeros(self.n, self.k2);
        GameSpec {
            n: self.n,
            k1: self.k1,
            k2: self.k2,
            a: self.a.clone(),
            b: [self.b0.clone(), zb.clone(), zb.clone(), zb],
            c: [self.c0.clone(), zc.clone(), zc.clone(), zc],
            q1: self.q1.clone(),
            n1: self.n1.clone(),
            g1: self.g1.clone(),
            q2: self.q2.clone(),
            n2: self.n2.clone(),
            g2: self.g2.clone(),
            x0: self.x0.clone(),
        }
    }

    pub fn has_noise(&self) -> bool {
        self.a[1..].iter().any(|m| m.iter().any(|v| *v != 0.0))
            || self.sigma.iter().any(|s| s.iter().any(|v| *v != 0.0))
    }
}
