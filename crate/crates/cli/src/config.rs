//! Declarative experiment configuration: one TOML file with named
//! sections, strict about unknown keys so config drift fails fast.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use routelab_core::error::Error;
use routelab_core::model::ModelSpec;
use routelab_core::optim::Hyperparams;
use routelab_core::signatures::{CombineMode, SAggregate};
use routelab_core::taskgen::StreamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SurrogateValidate,
    #[serde(rename = "ablate-2x2")]
    Ablate2x2,
    DenomIntervene,
    EtaMatch,
    Stress,
    RoutingXSchedule,
    OverlapSweep,
    Breadth,
    ReverseRouting,
    NoisyBoundary,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::SurrogateValidate => "surrogate-validate",
            Protocol::Ablate2x2 => "ablate-2x2",
            Protocol::DenomIntervene => "denom-intervene",
            Protocol::EtaMatch => "eta-match",
            Protocol::Stress => "stress",
            Protocol::RoutingXSchedule => "routing-x-schedule",
            Protocol::OverlapSweep => "overlap-sweep",
            Protocol::Breadth => "breadth",
            Protocol::ReverseRouting => "reverse-routing",
            Protocol::NoisyBoundary => "noisy-boundary",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub name: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoName {
    Adam,
    Adamw,
    Adafactor,
    Sgdm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_algos")]
    pub algos: Vec<AlgoName>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub clip_after_modification: bool,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_algos() -> Vec<AlgoName> {
    vec![AlgoName::Adam]
}
fn default_eta() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_wd() -> f64 {
    0.01
}

impl OptimizerSection {
    pub fn hyper(&self) -> Hyperparams {
        Hyperparams {
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            clip_after_modification: self.clip_after_modification,
        }
    }

    pub fn algo(&self, name: AlgoName) -> routelab_core::optim::Algo {
        use routelab_core::optim::Algo;
        match name {
            AlgoName::Adam => Algo::Adam,
            AlgoName::Adamw => Algo::AdamW { weight_decay: self.weight_decay },
            AlgoName::Adafactor => Algo::AdaFactor,
            AlgoName::Sgdm => Algo::SgdMomentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureSection {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_buffer_cap")]
    pub buffer_cap: usize,
    #[serde(default = "default_refresh")]
    pub refresh_every: u64,
    #[serde(default = "default_combine")]
    pub combine: CombineMode,
    #[serde(default = "default_weighted")]
    pub weighted: bool,
    #[serde(default = "default_aggregate")]
    pub aggregate: SAggregate,
}

fn default_rank() -> usize {
    4
}
fn default_buffer_cap() -> usize {
    50
}
fn default_refresh() -> u64 {
    10
}
fn default_combine() -> CombineMode {
    CombineMode::Replace
}
fn default_weighted() -> bool {
    true
}
fn default_aggregate() -> SAggregate {
    SAggregate::Mean
}

impl Default for SignatureSection {
    fn default() -> Self {
        SignatureSection {
            rank: default_rank(),
            buffer_cap: default_buffer_cap(),
            refresh_every: default_refresh(),
            combine: default_combine(),
            weighted: default_weighted(),
            aggregate: default_aggregate(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    #[serde(default = "default_beta_s")]
    pub beta_s: f64,
}

fn default_alpha_max() -> f64 {
    0.5
}
fn default_beta_s() -> f64 {
    0.99
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { alpha_max: default_alpha_max(), beta_s: default_beta_s() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsSection {
    #[serde(default = "default_alpha_grid")]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda: Vec<f64>,
    #[serde(default = "default_rho_grid")]
    pub rho: Vec<f64>,
    #[serde(default = "default_budget")]
    pub replay_budget: f64,
    #[serde(default)]
    pub boundary_noise: Vec<f64>,
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.5]
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.5]
}
fn default_rho_grid() -> Vec<f64> {
    vec![0.5]
}
fn default_budget() -> f64 {
    0.005
}

impl Default for GridsSection {
    fn default() -> Self {
        GridsSection {
            alpha: default_alpha_grid(),
            delta: Vec::new(),
            lambda: default_lambda_grid(),
            rho: default_rho_grid(),
            replay_budget: default_budget(),
            boundary_noise: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSection {
    #[serde(default = "default_snapshot")]
    pub snapshot_interval: u64,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default = "default_adapt_k")]
    pub adapt_k: u64,
    #[serde(default = "default_adapt_interval")]
    pub adapt_interval: u64,
    #[serde(default)]
    pub dump_state: bool,
}

fn default_snapshot() -> u64 {
    10
}
fn default_eval_size() -> usize {
    256
}
fn default_adapt_k() -> u64 {
    500
}
fn default_adapt_interval() -> u64 {
    10
}

impl Default for ProbesSection {
    fn default() -> Self {
        ProbesSection {
            snapshot_interval: default_snapshot(),
            eval_size: default_eval_size(),
            adapt_k: default_adapt_k(),
            adapt_interval: default_adapt_interval(),
            dump_state: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Sub-seeded replicate runs averaged into each cell value; desk-scale
    /// self-averaging in place of large-model width.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: ProtocolSection,
    pub stream: StreamConfig,
    pub model: ModelSpec,
    #[serde(default = "default_optimizer_section")]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub signature: SignatureSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub grids: GridsSection,
    #[serde(default)]
    pub probes: ProbesSection,
    pub run: RunSection,
}

fn default_optimizer_section() -> OptimizerSection {
    OptimizerSection {
        algos: default_algos(),
        eta: default_eta(),
        beta1: default_beta1(),
        beta2: default_beta2(),
        eps: default_eps(),
        grad_clip: default_clip(),
        clip_after_modification: false,
        weight_decay: default_wd(),
    }
}

impl ExperimentSpec {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let mut sorted = self.run.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.run.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.grids.alpha.is_empty() {
            return Err(Error::Config("alpha grid must be non-empty".into()));
        }
        for a in &self.grids.alpha {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("alpha {a} outside [0,1]")));
            }
        }
        if self.probes.adapt_k % self.probes.adapt_interval != 0 {
            return Err(Error::Config(
                "adapt_k must be a multiple of adapt_interval".into(),
            ));
        }
        Ok(())
    }

    /// Platform-stable hash of the canonical serialized spec.
    pub fn spec_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[protocol]
name = "ablate-2x2"

[stream]
delta = 0.1
tasks = 2
input_dim = 24
subspace_dim = 4
seed = 1

[model]
layer_widths = [24, 32, 1]
seed = 7

[run]
seeds = [1, 2, 3]
output_dir = "out"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(spec.protocol.name, Protocol::Ablate2x2);
        assert_eq!(spec.signature.rank, 4);
        assert_eq!(spec.optimizer.beta2, 0.999);
        assert_eq!(spec.schedule.alpha_max, 0.5);
        assert_eq!(spec.probes.adapt_k, 500);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let bad = MINIMAL.replace("[run]", "[run]\nbogus_key = 3\n");
        // bogus_key lands in [run], which denies unknown fields.
        assert!(ExperimentSpec::from_toml(&bad).is_err());
        let bad2 = format!("{MINIMAL}\n[nonsense]\nx = 1\n");
        assert!(ExperimentSpec::from_toml(&bad2).is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let bad = MINIMAL.replace("seeds = [1, 2, 3]", "seeds = [1, 1]");
        assert!(ExperimentSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn spec_hash_is_stable_and_sensitive() {
        let a = ExperimentSpec::from_toml(MINIMAL).unwrap();
        let b = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(a.spec_hash(), b.spec_hash());
        let c =
            ExperimentSpec::from_toml(&MINIMAL.replace("delta = 0.1", "delta = 0.2")).unwrap();
        assert_ne!(a.spec_hash(), c.spec_hash());
    }
}
