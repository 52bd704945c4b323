use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use stacklq_core::assembly::LeaderBlocks;
use stacklq_core::equilibrium::{adjoint_check, stationarity_test_game, Direction, PerturbReport, Player};
use stacklq_core::filtering::{summarize, tower_check_streaming, ClosedLoop, TowerReport};
use stacklq_core::game_model::validate_spec;
use stacklq_core::linalg::Mat;
use stacklq_core::mat_json::MatJson;
use stacklq_core::principal_agent::{
    build_pa_game, pa_closed_loop, pa_consistency, preferences_streaming, solve_pa, PaField,
};
use stacklq_core::riccati::{
    attempt_general_leader_system, block_residuals, residual_bound, solve_cid_follower, solve_cid_leader_system,
    CidLeaderField, GeneralLeaderField, RiccatiField,
};
use stacklq_core::{CidGame, Error, GameSpec, MatPath, TimeGrid};

use crate::config::{ModeSpec, RunConfig};

const ADJOINT_TERMINAL_TOL: f64 = 1e-8;
const ADJOINT_STUDENTIZED_TOL: f64 = 4.0;

#[derive(Debug)]
pub enum RunError {
    Core(Error),
    Validation(Vec<String>),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) | RunError::Core(Error::Invalid(_)) => 2,
            RunError::Core(Error::AssumptionViolated { .. }) => 3,
            RunError::Core(Error::NonFinite { .. }) => 4,
            RunError::Core(Error::DegenerateFit) | RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Validation(issues) => {
                write!(f, "validation failed:")?;
                for i in issues {
                    write!(f, "\n  - {i}")?;
                }
                Ok(())
            }
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Core(e)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn csv(&self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))
    }

    fn json(&self, name: &str, value: &impl Serialize) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn mat_names(name: &str, m: &Mat) -> Vec<String> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(format!("{name}_{i}_{j}"));
        }
    }
    out
}

fn mat_values(m: &Mat, out: &mut Vec<String>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(num(m[(i, j)]));
        }
    }
}

/// One row per node: node, t, then every named path flattened row-major.
fn path_table(out: &Out, file: &str, grid: TimeGrid, paths: &[(&str, &MatPath)]) -> Result<(), RunError> {
    let mut header = vec!["node".to_string(), "t".to_string()];
    for (name, p) in paths {
        header.extend(mat_names(name, p.at(0)));
    }
    let rows = (0..=grid.n_steps).map(|k| {
        let mut r = vec![k.to_string(), num(grid.t(k))];
        for (_, p) in paths {
            mat_values(p.at(k), &mut r);
        }
        r
    });
    out.csv(file, &header, rows)
}

#[derive(Serialize)]
struct ResidualReport {
    block: String,
    residual: f64,
    bound: f64,
    pass: bool,
}

fn residuals(paths: &[MatPath], field: &dyn RiccatiField) -> Vec<ResidualReport> {
    let res = block_residuals(paths, field);
    field
        .names()
        .into_iter()
        .zip(res)
        .zip(paths)
        .map(|((block, residual), p)| {
            let bound = residual_bound(p);
            ResidualReport {
                block,
                residual,
                bound,
                pass: residual <= bound,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct TowerSummary {
    n_paths: usize,
    max_gap: [f64; 3],
    flagged: Vec<usize>,
    threshold: f64,
    pass: bool,
}

impl From<TowerReport> for TowerSummary {
    fn from(r: TowerReport) -> Self {
        Self {
            n_paths: r.n_paths,
            max_gap: r.max_gap,
            flagged: r.flagged,
            threshold: r.threshold,
            pass: r.pass,
        }
    }
}

fn paths_csv(out: &Out, cl: &ClosedLoop, cfg: &RunConfig, controls: &[String]) -> Result<(), RunError> {
    let d = 2 * cl.n;
    let mut header = vec!["path".to_string(), "node".to_string(), "t".to_string()];
    for b in ["x", "xhat", "xcheck", "xhatcheck"] {
        header.extend((0..d).map(|c| format!("{b}_{c}")));
    }
    header.extend(controls.iter().cloned());
    let n = cfg.sim.n_recorded.min(cfg.sim.n_paths);
    let mut rows = Vec::new();
    for path in 0..n {
        let rec = cl.record_path(cfg.sim.seed, path as u64)?;
        for k in 0..=cl.grid.n_steps {
            let mut r = vec![path.to_string(), k.to_string(), num(cl.grid.t(k))];
            r.extend(rec.stacked(k).into_iter().map(num));
            r.extend(rec.u1[k].iter().chain(rec.u2[k].iter()).map(|v| num(*v)));
            rows.push(r);
        }
    }
    out.csv("paths.csv", &header, rows)
}

fn summary_csv(out: &Out, cl: &ClosedLoop, cfg: &RunConfig, controls: &[String]) -> Result<(), RunError> {
    let s = summarize(cl, cfg.sim.n_paths, cfg.sim.seed);
    let d = 2 * cl.n;
    let mut columns = s.columns.clone();
    for (c, name) in columns.iter_mut().skip(4 * d).zip(controls) {
        *c = name.clone();
    }
    let mut header = vec!["node".to_string(), "t".to_string()];
    for c in &columns {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_se"));
    }
    let rows = (0..s.t.len()).map(|k| {
        let mut r = vec![k.to_string(), num(s.t[k])];
        for c in 0..columns.len() {
            r.push(num(s.mean[k][c]));
            r.push(num(s.se[k][c]));
        }
        r
    });
    out.csv("summary.csv", &header, rows)
}

fn gain_or(cfg: Option<&MatJson>, default: Mat) -> Result<Mat, RunError> {
    match cfg {
        Some(m) => m
            .to_mat()
            .map_err(|e| RunError::Validation(vec![format!("perturbation: {e}")])),
        None => Ok(default),
    }
}

fn stationarity(cl: &ClosedLoop, cfg: &RunConfig, leader: Mat, follower: Mat) -> Result<[PerturbReport; 2], RunError> {
    let eps = cfg.epsilons();
    let n = cfg.perturbation_paths();
    let seed = cfg.sim.seed;
    let l = stationarity_test_game(
        cl,
        &Direction {
            player: Player::Leader,
            gain: gain_or(cfg.perturbation.leader_gain.as_ref(), leader)?,
        },
        &eps,
        n,
        seed,
    )?;
    let f = stationarity_test_game(
        cl,
        &Direction {
            player: Player::Follower,
            gain: gain_or(cfg.perturbation.follower_gain.as_ref(), follower)?,
        },
        &eps,
        n,
        seed,
    )?;
    Ok([l, f])
}

pub fn run(cfg: &RunConfig, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let out = Out { dir: dir.to_path_buf() };
    match &cfg.spec {
        ModeSpec::Cid(spec) => run_cid(&out, cfg, spec),
        ModeSpec::General(spec) => run_general(&out, cfg, spec),
        ModeSpec::PrincipalAgent(params) => run_pa(&out, cfg, params),
    }
}

fn run_cid(out: &Out, cfg: &RunConfig, spec: &stacklq_core::CidSpec) -> Result<(), RunError> {
    let report = spec.validate();
    if !report.is_valid() {
        return Err(RunError::Validation(report.issues));
    }
    let grid = cfg.grid;
    let p = solve_cid_follower(spec, grid)?;
    let l = solve_cid_leader_system(spec, &p, grid)?;
    path_table(
        out,
        "riccati.csv",
        grid,
        &[
            ("P", &p),
            ("P1", &l.p[0]),
            ("P2", &l.p[1]),
            ("P3", &l.p[2]),
            ("P4", &l.p[3]),
        ],
    )?;
    let game = CidGame::from(spec);
    let cl = ClosedLoop::new(&game, &p, &l)?;
    let controls = vec!["u1".to_string(), "u2".to_string()];
    paths_csv(out, &cl, cfg, &controls)?;
    summary_csv(out, &cl, cfg, &controls)?;

    let mut joint = vec![p.clone()];
    joint.extend(l.p.iter().cloned());
    let residual = residuals(&joint, &CidLeaderField::new(&game));
    let tower = TowerSummary::from(tower_check_streaming(&cl, cfg.sim.n_paths, cfg.sim.seed));
    let unit = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
    let [leader, follower] = stationarity(&cl, cfg, unit.clone(), unit)?;
    let adj = adjoint_check(&cl, cfg.sim.n_paths, cfg.sim.seed);
    let adj_pass = adj.terminal_error <= ADJOINT_TERMINAL_TOL && adj.max_studentized <= ADJOINT_STUDENTIZED_TOL;
    let pass = residual.iter().all(|r| r.pass) && tower.pass && leader.pass && follower.pass && adj_pass;
    out.json(
        "verification.json",
        &json!({
            "residuals": residual,
            "tower": tower,
            "stationarity": { "leader": leader, "follower": follower },
            "adjoint": {
                "pass": adj_pass,
                "n_paths": adj.n_paths,
                "terminal_error": adj.terminal_error,
                "max_studentized": adj.max_studentized,
                "max_mean_residual": adj.mean_abs.iter().cloned().fold(0.0, f64::max),
            },
            "pass": pass,
        }),
    )
}

#[derive(Serialize)]
struct NamedMat {
    name: String,
    #[serde(flatten)]
    value: MatJson,
}

fn named_blocks(spec: &GameSpec, p1: &Mat, t: f64, node: usize) -> Result<Vec<NamedMat>, RunError> {
    let b = LeaderBlocks::new(spec, p1, t, node)?;
    Ok(b.named()
        .into_iter()
        .map(|(name, m)| NamedMat {
            name,
            value: MatJson::from(&m),
        })
        .collect())
}

fn run_general(out: &Out, cfg: &RunConfig, spec: &GameSpec) -> Result<(), RunError> {
    let report = validate_spec(spec);
    if !report.is_valid() {
        return Err(RunError::Validation(report.issues));
    }
    let grid = cfg.grid;
    let last = grid.n_steps;
    let sol = match attempt_general_leader_system(spec, grid) {
        Ok(s) => s,
        Err(e) => {
            let failure = match &e {
                Error::AssumptionViolated { t, node, which } => json!({
                    "kind": "assumption",
                    "assumption": which.label(),
                    "t": t,
                    "node": node,
                    "message": e.to_string(),
                }),
                Error::NonFinite { t, which } => json!({
                    "kind": "blow-up",
                    "block": which,
                    "t": t,
                    "message": e.to_string(),
                }),
                _ => return Err(e.into()),
            };
            let terminal = named_blocks(spec, &spec.g1, grid.horizon, last)?;
            out.json("blocks.json", &json!({ "T": terminal }))?;
            out.json("failure.json", &failure)?;
            return Err(e.into());
        }
    };
    out.json(
        "blocks.json",
        &json!({
            "t0": named_blocks(spec, sol.follower.at(0), 0.0, 0)?,
            "T": named_blocks(spec, sol.follower.at(last), grid.horizon, last)?,
        }),
    )?;
    let mut header = vec!["node".to_string(), "t".to_string()];
    header.extend((1..=4).map(|s| format!("cond_step{s}")));
    let slots = ["F", "H", "C", "HC"];
    for i in 1..=3 {
        for s in slots {
            header.extend(mat_names(&format!("Sigma{i}_{s}"), &sol.sigma[0].sigma[i - 1][0]));
        }
    }
    let rows = (0..=last).map(|k| {
        let sg = &sol.sigma[k];
        let mut r = vec![k.to_string(), num(grid.t(k))];
        r.extend(sg.cond.iter().map(|c| num(*c)));
        for lv in &sg.sigma {
            for m in lv {
                mat_values(m, &mut r);
            }
        }
        r
    });
    out.csv("sigma.csv", &header, rows)?;
    path_table(
        out,
        "riccati.csv",
        grid,
        &[
            ("P", &sol.follower),
            ("P1", &sol.p[0]),
            ("P2", &sol.p[1]),
            ("P3", &sol.p[2]),
            ("P4", &sol.p[3]),
        ],
    )?;
    let mut joint = vec![sol.follower.clone()];
    joint.extend(sol.p.iter().cloned());
    let residual = residuals(&joint, &GeneralLeaderField { spec });
    out.json(
        "verification.json",
        &json!({
            "residuals": residual,
            "max_condition": sol.cond.iter().flatten().cloned().fold(0.0, f64::max),
            "pass": residual.iter().all(|r| r.pass),
        }),
    )
}

fn run_pa(out: &Out, cfg: &RunConfig, params: &stacklq_core::principal_agent::PaParams) -> Result<(), RunError> {
    let report = params.validate();
    if !report.is_valid() {
        return Err(RunError::Validation(report.issues));
    }
    let grid = cfg.grid;
    let sol = solve_pa(params, grid)?;
    let g = &sol.gains;
    let tables = [
        (&g.agent_hat, ["e_hat", "c_hat"]),
        (&g.agent_cross, ["e_cross", "c_cross"]),
        (&g.principal_check, ["s_check", "d_check"]),
        (&g.principal_cross, ["s_cross", "d_cross"]),
    ];
    let mut header = vec!["node".to_string(), "t".to_string()];
    for (path, rows) in &tables {
        for name in rows {
            header.extend((0..path.at(0).ncols()).map(|j| format!("{name}_{j}")));
        }
    }
    let rows = (0..=grid.n_steps).map(|k| {
        let mut r = vec![k.to_string(), num(grid.t(k))];
        for (path, _) in &tables {
            mat_values(path.at(k), &mut r);
        }
        r
    });
    out.csv("gains.csv", &header, rows)?;

    let cl = pa_closed_loop(params, &sol)?;
    let controls: Vec<String> = ["e", "c", "s", "d"].iter().map(|s| s.to_string()).collect();
    paths_csv(out, &cl, cfg, &controls)?;
    let prefs = preferences_streaming(&cl, cfg.sim.n_paths, cfg.sim.seed);
    out.json(
        "costs.json",
        &json!({
            "J1": prefs.j1,
            "J2": prefs.j2,
            "convention": "preference values, larger is better",
        }),
    )?;

    let game = build_pa_game(params);
    let mut joint = vec![sol.p.clone()];
    joint.extend(sol.pcal.iter().cloned());
    let residual = residuals(&joint, &PaField { game: &game });
    let consistency = pa_consistency(params, &sol)?;
    let tower = TowerSummary::from(tower_check_streaming(&cl, cfg.sim.n_paths, cfg.sim.seed));
    // Leader perturbs s along y̌, follower perturbs c along m̂.
    let mut lg = Mat::zeros(2, 4);
    lg[(0, 0)] = 1.0;
    let mut fg = Mat::zeros(2, 4);
    fg[(1, 1)] = 1.0;
    let [leader, follower] = stationarity(&cl, cfg, lg, fg)?;
    let pass = residual.iter().all(|r| r.pass) && tower.pass && leader.pass && follower.pass;
    out.json(
        "verification.json",
        &json!({
            "residuals": residual,
            "consistency": consistency,
            "tower": tower,
            "stationarity": { "leader": leader, "follower": follower },
            "pass": pass,
        }),
    )
}
