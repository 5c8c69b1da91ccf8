//! Structured run configuration: TOML schema with strict unknown-key
//! rejection, defaults matching the canonical desk-scale setup, and
//! conversion into the core types.

use mflab_core::flow::FlowMatrix;
use mflab_core::grid::{InitialLaw, MixtureComponent};
use mflab_core::harness::ExperimentPlan;
use mflab_core::pde::{KernelRepresentation, PdeConfig};
use mflab_core::potentials::{KernelKind, PotentialSpec};
use mflab_core::sde::{EpsilonPolicy, SdeConfig};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_d() -> usize {
    3
}
fn default_s() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub s: f64,
    pub d: usize,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { s: default_s(), d: default_d() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// "gradient" (M = -I), "conservative" (rotation), or "matrix"
    pub kind: String,
    /// row-major entries, required when kind = "matrix"
    pub entries: Option<Vec<Vec<f64>>>,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { kind: "gradient".into(), entries: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n: usize,
    pub box_size: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 64, box_size: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub sigma: f64,
    pub coupling: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { sigma: 1.0, coupling: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureRow {
    pub weight: f64,
    pub center: [f64; 3],
    pub std: f64,
}

impl Default for MixtureRow {
    fn default() -> Self {
        Self { weight: 1.0, center: [0.0; 3], std: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    /// "gaussian", "mixture", or "ball"
    pub kind: String,
    pub std: f64,
    pub center: [f64; 3],
    pub radius: f64,
    pub components: Vec<MixtureRow>,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            kind: "gaussian".into(),
            std: 1.0,
            center: [0.0; 3],
            radius: 1.0,
            components: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    pub epsilon0: f64,
    /// "halve" or "fixed"
    pub epsilon_policy: String,
    pub snapshots: Vec<f64>,
    pub runs: usize,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self {
            n_particles: 64,
            dt: 1e-3,
            t_final: 1.0,
            epsilon0: 1e-3,
            epsilon_policy: "halve".into(),
            snapshots: vec![0.25, 0.5, 0.75, 1.0],
            runs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    /// 0 selects the advective CFL step automatically
    pub dt: f64,
    pub t_final: f64,
    pub dealias: f64,
    /// "free-space" or "torus-symbol"
    pub kernel_rep: String,
    pub snapshots: Vec<f64>,
}

impl Default for PdeSection {
    fn default() -> Self {
        Self {
            dt: 0.0,
            t_final: 1.0,
            dealias: 2.0 / 3.0,
            kernel_rep: "free-space".into(),
            snapshots: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub n_sweep: Vec<usize>,
    pub runs: usize,
    pub t_final: f64,
    pub snapshots: Vec<f64>,
    pub sde_dt: f64,
    pub pde_dt: f64,
    pub epsilon0: f64,
    pub with_chaos: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            n_sweep: vec![32, 64, 128, 256],
            runs: 100,
            t_final: 1.0,
            snapshots: vec![0.25, 0.5, 0.75, 1.0],
            sde_dt: 2e-3,
            pde_dt: 1e-2,
            epsilon0: 1e-3,
            with_chaos: false,
        }
    }
}

/// The full configuration file; an empty file resolves to these defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub kernel: KernelSection,
    pub flow: FlowSection,
    pub grid: GridSection,
    pub dynamics: DynamicsSection,
    pub initial: InitialSection,
    pub sde: SdeSection,
    pub pde: PdeSection,
    pub study: StudySection,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: FileConfig = toml::from_str(text)
            .map_err(|e| anyhow::anyhow!("configuration schema violation: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.spec()?;
        self.flow_matrix()?;
        self.initial_law()?.validate()?;
        if !self.grid.n.is_power_of_two() {
            anyhow::bail!("grid.n must be a power of two, got {}", self.grid.n);
        }
        match self.pde.kernel_rep.as_str() {
            "free-space" | "torus-symbol" => {}
            other => anyhow::bail!(
                "pde.kernel_rep must be \"free-space\" or \"torus-symbol\", got \"{other}\""
            ),
        }
        match self.sde.epsilon_policy.as_str() {
            "halve" | "fixed" => {}
            other => anyhow::bail!(
                "sde.epsilon_policy must be \"halve\" or \"fixed\", got \"{other}\""
            ),
        }
        Ok(())
    }

    pub fn spec(&self) -> anyhow::Result<PotentialSpec> {
        let kind = if self.kernel.s == 0.0 { KernelKind::Log } else { KernelKind::Riesz };
        PotentialSpec::new(kind, self.kernel.s, self.kernel.d)
            .map_err(|e| anyhow::anyhow!("kernel: {e}"))
    }

    pub fn flow_matrix(&self) -> anyhow::Result<FlowMatrix> {
        let d = self.kernel.d;
        match self.flow.kind.as_str() {
            "gradient" => Ok(FlowMatrix::neg_identity(d)),
            "conservative" => Ok(FlowMatrix::rotation(d)),
            "matrix" => {
                let rows = self
                    .flow
                    .entries
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("flow.kind = \"matrix\" needs flow.entries"))?;
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    anyhow::bail!("flow.entries must be a {d}x{d} matrix");
                }
                let mut m = Array2::zeros((d, d));
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        m[[i, j]] = *v;
                    }
                }
                Ok(FlowMatrix::new(m)?)
            }
            other => anyhow::bail!(
                "flow.kind must be \"gradient\", \"conservative\", or \"matrix\", got \"{other}\""
            ),
        }
    }

    pub fn initial_law(&self) -> anyhow::Result<InitialLaw> {
        match self.initial.kind.as_str() {
            "gaussian" => Ok(InitialLaw::Gaussian {
                center: self.initial.center,
                std: self.initial.std,
            }),
            "mixture" => Ok(InitialLaw::GaussianMixture {
                components: self
                    .initial
                    .components
                    .iter()
                    .map(|c| MixtureComponent { weight: c.weight, center: c.center, std: c.std })
                    .collect(),
            }),
            "ball" => Ok(InitialLaw::UniformBall {
                center: self.initial.center,
                radius: self.initial.radius,
            }),
            other => anyhow::bail!(
                "initial.kind must be \"gaussian\", \"mixture\", or \"ball\", got \"{other}\""
            ),
        }
    }

    pub fn sde_config(&self, seed: u64) -> SdeConfig {
        SdeConfig {
            n_particles: self.sde.n_particles,
            sigma: self.dynamics.sigma,
            dt: self.sde.dt,
            t_final: self.sde.t_final,
            epsilon0: self.sde.epsilon0,
            epsilon_policy: if self.sde.epsilon_policy == "fixed" {
                EpsilonPolicy::Fixed
            } else {
                EpsilonPolicy::HalveOnApproach
            },
            seed,
            coupling: self.dynamics.coupling,
            snapshot_times: self.sde.snapshots.clone(),
        }
    }

    pub fn kernel_rep(&self) -> KernelRepresentation {
        if self.pde.kernel_rep == "torus-symbol" {
            KernelRepresentation::TorusSymbol
        } else {
            KernelRepresentation::FreeSpace
        }
    }

    /// PDE step: configured value, or the advective CFL bound from the
    /// initial velocity with a safety factor, capped for splitting accuracy.
    pub fn pde_config(&self, max_u0: f64) -> PdeConfig {
        let dt = if self.pde.dt > 0.0 {
            self.pde.dt
        } else if self.dynamics.coupling == 0.0 || max_u0 <= 0.0 {
            0.02
        } else {
            (0.45 * self.grid.box_size / (self.grid.n as f64 * max_u0)).min(0.02)
        };
        PdeConfig {
            sigma: self.dynamics.sigma,
            dt,
            t_final: self.pde.t_final,
            dealias_fraction: self.pde.dealias,
            snapshot_times: self.pde.snapshots.clone(),
            coupling: self.dynamics.coupling,
            kernel_rep: self.kernel_rep(),
        }
    }

    pub fn experiment_plan(&self, seed: u64) -> anyhow::Result<ExperimentPlan> {
        let mut plan =
            ExperimentPlan::new(self.spec()?, self.flow_matrix()?, self.initial_law()?);
        plan.sigma = self.dynamics.sigma;
        plan.box_size = self.grid.box_size;
        plan.grid_n = self.grid.n;
        plan.n_sweep = self.study.n_sweep.clone();
        plan.runs = self.study.runs;
        plan.sde_dt = self.study.sde_dt;
        plan.pde_dt = self.study.pde_dt;
        plan.t_final = self.study.t_final;
        plan.snapshot_times = self.study.snapshots.clone();
        plan.epsilon0 = self.study.epsilon0;
        plan.base_seed = seed;
        Ok(plan)
    }

    /// Canonical TOML echo of the fully resolved configuration.
    pub fn echo(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.echo()?.as_bytes())))
    }
}
