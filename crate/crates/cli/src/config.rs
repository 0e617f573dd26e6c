//! Experiment configuration: profile defaults overlaid with a user file and flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use luno::pde::{AdrVariant, Scenario, Scenario1d, ScenarioAdr, Splits};
use luno::train::TrainConfig;
use luno::Activation;

use crate::CliError;

const DESK: &str = include_str!("../../../profiles/desk.toml");
const PAPER: &str = include_str!("../../../profiles/paper.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Burgers,
    HyperDiffusion,
    KsConservative,
    AdrBase,
    AdrFlip,
    AdrPos,
    AdrPosNeg,
    AdrPosNegFlip,
}

impl ScenarioName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Burgers => "burgers",
            Self::HyperDiffusion => "hyper_diffusion",
            Self::KsConservative => "ks_conservative",
            Self::AdrBase => "adr_base",
            Self::AdrFlip => "adr_flip",
            Self::AdrPos => "adr_pos",
            Self::AdrPosNeg => "adr_pos_neg",
            Self::AdrPosNegFlip => "adr_pos_neg_flip",
        }
    }

    pub fn is_adr(self) -> bool {
        self.adr_variant().is_some()
    }

    fn adr_variant(self) -> Option<AdrVariant> {
        match self {
            Self::AdrBase => Some(AdrVariant::Base),
            Self::AdrFlip => Some(AdrVariant::Flip),
            Self::AdrPos => Some(AdrVariant::Pos),
            Self::AdrPosNeg => Some(AdrVariant::PosNeg),
            Self::AdrPosNegFlip => Some(AdrVariant::PosNegFlip),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    /// Extra scenarios generated for evaluation only (test split).
    #[serde(default)]
    pub ood: Vec<ScenarioName>,
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub valid: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDefaults {
    pub one_d: SplitCounts,
    pub adr: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub modes: usize,
    pub padding: usize,
    pub activation: Activation,
    /// Input frames per prediction.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_one_d: usize,
    pub epochs_adr: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefConfig {
    pub rank: usize,
    /// GGN data subsample for 2D scenarios; 1D uses every training pair.
    pub subsample_adr: usize,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsConfig {
    pub list: Vec<String>,
    pub n_samples: usize,
    pub ensemble_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_points: usize,
    pub half_decades: f64,
    pub valid_pairs: usize,
    /// Grid for methods that re-predict at every grid value.
    pub sample_points: usize,
    pub sample_half_decades: f64,
    pub sample_valid_pairs: usize,
    pub sample_n_samples: usize,
    /// Input-noise grid center relative to the RMS of the input state.
    pub input_sigma_center: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub n_trajectories: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub trajectory: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub scenario: ScenarioConfig,
    pub splits: SplitDefaults,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub belief: BeliefConfig,
    pub methods: MethodsConfig,
    pub calibration: CalibrationConfig,
    pub rollout: RolloutConfig,
    pub bench: BenchConfig,
}

/// Command-line overrides applied last.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn profile_text(p: Profile) -> &'static str {
    match p {
        Profile::Desk => DESK,
        Profile::Paper => PAPER,
    }
}

/// Parses TOML, falling back to JSON.
fn parse_document(text: &str, origin: &str) -> Result<serde_json::Value, CliError> {
    match toml::from_str::<serde_json::Value>(text) {
        Ok(v) => Ok(v),
        Err(te) => serde_json::from_str(text)
            .map_err(|je| CliError::Config(format!("{origin}: not TOML ({te}) nor JSON ({je})"))),
    }
}

/// Recursive table merge; scalars and arrays in `over` replace those in `base`.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn profile_default(p: Profile) -> Self {
        let v = parse_document(profile_text(p), "built-in profile").expect("built-in profiles parse");
        serde_json::from_value(v).expect("built-in profiles are complete")
    }

    /// Profile defaults, then the optional config file, then flags. The
    /// profile comes from the flag, else the file's `profile` key, else desk.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                Some(parse_document(&text, &path.display().to_string())?)
            }
            None => None,
        };
        let file_profile = user
            .as_ref()
            .and_then(|u| u.get("profile"))
            .map(|p| serde_json::from_value::<Profile>(p.clone()))
            .transpose()
            .map_err(|e| CliError::Config(format!("bad profile: {e}")))?;
        let profile = ov.profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut doc = parse_document(profile_text(profile), "built-in profile")?;
        if let Some(u) = user {
            merge(&mut doc, u);
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        cfg.profile = profile;
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for m in &self.methods.list {
            luno::eval::MethodKind::parse(m)?;
        }
        if self.model.window == 0 {
            return Err(CliError::Config("model.window must be positive".into()));
        }
        if self.methods.list.iter().any(|m| m == "ensemble") && self.methods.ensemble_size < 2 {
            return Err(CliError::Config("an ensemble needs at least two members".into()));
        }
        if self.scenario.ood.iter().any(|s| s.is_adr() != self.scenario.name.is_adr()) {
            return Err(CliError::Config("evaluation scenarios must share the training grid family".into()));
        }
        Ok(())
    }

    pub fn split_counts(&self) -> SplitCounts {
        let d = if self.scenario.name.is_adr() { self.splits.adr } else { self.splits.one_d };
        SplitCounts {
            train: self.scenario.train.unwrap_or(d.train),
            valid: self.scenario.valid.unwrap_or(d.valid),
            test: self.scenario.test.unwrap_or(d.test),
        }
    }

    /// Solver scenario for `name` with this experiment's split counts and seed.
    pub fn build_scenario(&self, name: ScenarioName) -> Scenario {
        let c = self.split_counts();
        let splits = Splits { train: c.train, valid: c.valid, test: c.test };
        let seed = luno::rng::derive(self.seed, name as u64);
        match name.adr_variant() {
            Some(v) => Scenario::Adr(ScenarioAdr { splits, seed, ..ScenarioAdr::new(v) }),
            None => {
                let base = match name {
                    ScenarioName::Burgers => Scenario1d::burgers(),
                    ScenarioName::HyperDiffusion => Scenario1d::hyper_diffusion(),
                    _ => Scenario1d::ks_conservative(),
                };
                Scenario::OneD(Scenario1d { splits, seed, ..base })
            }
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: if self.scenario.name.is_adr() { t.epochs_adr } else { t.epochs_one_d },
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Hash of the whole configuration except the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is a table").remove("out");
        hash_json(&v)
    }

    /// Hash of everything that determines the trained model.
    pub fn model_hash(&self) -> String {
        hash_json(&serde_json::json!({
            "seed": self.seed,
            "scenario": self.scenario,
            "splits": self.split_counts(),
            "model": self.model,
            "train": self.train,
            "ensemble_size": self.methods.ensemble_size,
        }))
    }

    /// Hash of everything that determines the fitted beliefs.
    pub fn belief_hash(&self) -> String {
        hash_json(&serde_json::json!({ "model": self.model_hash(), "belief": self.belief }))
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(serde_json::to_vec(v).expect("json serializes"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
