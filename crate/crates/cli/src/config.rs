use serde::Deserialize;
use serde_json::Value;
use stacklq_core::mat_json::MatJson;
use stacklq_core::principal_agent::PaParams;
use stacklq_core::{CidSpec, GameSpec, TimeGrid};

pub const DEFAULT_EPSILONS: [f64; 4] = [-0.04, -0.02, 0.02, 0.04];
pub const DEFAULT_RECORDED_PATHS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cid,
    General,
    PrincipalAgent,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Paths written to paths.csv.
    #[serde(default = "default_recorded")]
    pub n_recorded: usize,
}

fn default_recorded() -> usize {
    DEFAULT_RECORDED_PATHS
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub epsilons: Option<Vec<f64>>,
    pub n_paths: Option<usize>,
    pub leader_gain: Option<MatJson>,
    pub follower_gain: Option<MatJson>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Mode,
    grid: GridConfig,
    spec: Value,
    sim: Option<SimConfig>,
    perturbation: Option<PerturbationConfig>,
    output_dir: Option<String>,
}

#[derive(Debug, Clone)]
pub enum ModeSpec {
    Cid(CidSpec),
    General(GameSpec),
    PrincipalAgent(PaParams),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: TimeGrid,
    pub spec: ModeSpec,
    pub sim: SimConfig,
    pub perturbation: PerturbationConfig,
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
        let grid = TimeGrid::new(raw.grid.horizon, raw.grid.n_steps).map_err(|e| format!("grid: {e}"))?;
        let spec = match raw.mode {
            Mode::Cid => ModeSpec::Cid(serde_json::from_value(raw.spec).map_err(|e| format!("spec: {e}"))?),
            Mode::General => ModeSpec::General(serde_json::from_value(raw.spec).map_err(|e| format!("spec: {e}"))?),
            Mode::PrincipalAgent => {
                let p: PaParams = serde_json::from_value(raw.spec).map_err(|e| format!("spec: {e}"))?;
                if p.T != raw.grid.horizon {
                    return Err(format!(
                        "spec: T = {} differs from grid horizon {}",
                        p.T, raw.grid.horizon
                    ));
                }
                ModeSpec::PrincipalAgent(p)
            }
        };
        let sim = raw.sim.unwrap_or(SimConfig {
            n_paths: 1000,
            seed: 0,
            n_recorded: DEFAULT_RECORDED_PATHS,
        });
        if sim.n_paths < 2 {
            return Err("sim: n_paths must be at least 2".into());
        }
        Ok(Self {
            grid,
            spec,
            sim,
            perturbation: raw.perturbation.unwrap_or_default(),
            output_dir: raw.output_dir,
        })
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.perturbation
            .epsilons
            .clone()
            .unwrap_or_else(|| DEFAULT_EPSILONS.to_vec())
    }

    pub fn perturbation_paths(&self) -> usize {
        self.perturbation.n_paths.unwrap_or(self.sim.n_paths)
    }
}
