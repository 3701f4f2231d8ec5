use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{RuleOrder, DEFAULT_MPC_ROLLOUTS};
use crate::error::{Error, Result};
use crate::model::{EncoderVariant, ModelConfig};
use crate::simulator::{load_influence_csv, FeedbackMode, Preset, World, WorldConfig};
use crate::training::{Scenario, TrainConfig};

/// A recommendation policy the harness can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full model: combined encoder with the knowledge-tracing loss.
    Src,
    /// Attention-only encoder.
    SrcA,
    /// Pooled-MLP-only encoder.
    SrcM,
    /// Combined encoder trained without the knowledge-tracing loss.
    SrcNokt,
    SrcANokt,
    SrcMNokt,
    Random,
    Rule,
    Mpc,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Src,
        Method::SrcA,
        Method::SrcM,
        Method::SrcNokt,
        Method::SrcANokt,
        Method::SrcMNokt,
        Method::Random,
        Method::Rule,
        Method::Mpc,
    ];

    /// The six encoder-by-auxiliary-loss variants.
    pub const ABLATION: [Method; 6] = [
        Method::Src,
        Method::SrcA,
        Method::SrcM,
        Method::SrcNokt,
        Method::SrcANokt,
        Method::SrcMNokt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Src => "src",
            Method::SrcA => "src_a",
            Method::SrcM => "src_m",
            Method::SrcNokt => "src_nokt",
            Method::SrcANokt => "src_a_nokt",
            Method::SrcMNokt => "src_m_nokt",
            Method::Random => "random",
            Method::Rule => "rule",
            Method::Mpc => "mpc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    /// Encoder variant and whether the knowledge-tracing loss is dropped,
    /// for trained methods.
    pub fn learned(self) -> Option<(EncoderVariant, bool)> {
        match self {
            Method::Src => Some((EncoderVariant::Combined, false)),
            Method::SrcA => Some((EncoderVariant::AttentionOnly, false)),
            Method::SrcM => Some((EncoderVariant::MlpOnly, false)),
            Method::SrcNokt => Some((EncoderVariant::Combined, true)),
            Method::SrcANokt => Some((EncoderVariant::AttentionOnly, true)),
            Method::SrcMNokt => Some((EncoderVariant::MlpOnly, true)),
            Method::Random | Method::Rule | Method::Mpc => None,
        }
    }
}

/// `[world]`: a named preset with optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub preset: Preset,
    pub num_concepts: usize,
    pub decay: Option<f64>,
    pub noise_std: Option<f64>,
    pub feedback: Option<FeedbackMode>,
    /// Replaces the preset's influence matrix; one row per source concept.
    pub influence_csv: Option<PathBuf>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            preset: Preset::PrereqChain,
            num_concepts: 32,
            decay: None,
            noise_std: None,
            feedback: None,
            influence_csv: None,
        }
    }
}

impl WorldSection {
    pub fn world_config(&self, seed: u64) -> Result<WorldConfig> {
        let mut cfg = WorldConfig::preset(self.preset, self.num_concepts, seed);
        if let Some(d) = self.decay {
            cfg.decay = d;
        }
        if let Some(s) = self.noise_std {
            cfg.noise_std = s;
        }
        if let Some(f) = self.feedback {
            cfg.feedback = f;
        }
        if let Some(path) = &self.influence_csv {
            cfg.influence = load_influence_csv(path)?;
        }
        Ok(cfg)
    }

    /// The world for one seed. Presets draw their structure from the seed.
    pub fn build(&self, seed: u64) -> Result<World> {
        World::new(self.world_config(seed)?)
    }
}

/// `[experiment]`: the grid to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub scenarios: Vec<Scenario>,
    pub lengths: Vec<usize>,
    pub methods: Vec<Method>,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub mpc_rollouts: usize,
    pub rule_order: RuleOrder,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::Fixed],
            lengths: vec![5, 10, 20, 30],
            methods: vec![Method::Src, Method::Random, Method::Rule],
            eval_episodes: 100,
            seeds: (0..5).collect(),
            mpc_rollouts: DEFAULT_MPC_ROLLOUTS,
            rule_order: RuleOrder::Ascending,
        }
    }
}

/// Everything needed to run a grid; also the layout of the TOML config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: WorldSection,
    pub experiment: ExperimentSection,
}

impl ExperimentSpec {
    /// Parses a TOML config. The model always covers the world's concepts.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.model.num_concepts = spec.world.num_concepts;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::from_toml_str(&text)?;
        // Relative influence files resolve against the config's directory.
        if let (Some(csv), Some(dir)) = (&spec.world.influence_csv, path.parent()) {
            if csv.is_relative() {
                spec.world.influence_csv = Some(dir.join(csv));
            }
        }
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let x = &self.experiment;
        let bad = |msg: &str| Err(Error::Validation(msg.into()));
        if x.methods.is_empty() {
            return bad("experiment.methods is empty");
        }
        if x.scenarios.is_empty() {
            return bad("experiment.scenarios is empty");
        }
        if x.lengths.is_empty() {
            return bad("experiment.lengths is empty");
        }
        if x.seeds.is_empty() {
            return bad("experiment.seeds is empty");
        }
        if x.eval_episodes == 0 {
            return bad("experiment.eval_episodes must be >= 1");
        }
        if x.mpc_rollouts == 0 {
            return bad("experiment.mpc_rollouts must be >= 1");
        }
        if self.model.num_concepts != self.world.num_concepts {
            return Err(Error::Validation(format!(
                "model covers {} concepts but the world has {}",
                self.model.num_concepts, self.world.num_concepts
            )));
        }
        if let Some(&n) = x.lengths.iter().find(|&&n| n == 0 || n > self.world.num_concepts) {
            return Err(Error::Validation(format!(
                "path length {n} must lie in 1..={}",
                self.world.num_concepts
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.world.world_config(0).and_then(World::new)?;
        Ok(())
    }

    /// Train config for one grid cell.
    pub fn cell_train_config(&self, scenario: Scenario, length: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            scenario,
            path_length: length,
            seed,
            ..self.train.clone()
        }
    }

    /// Content hash of everything a single cell's result depends on. The
    /// grid axes are left out so a grown grid reuses finished cells.
    pub fn cell_hash(&self) -> Result<String> {
        let mut base = self.clone();
        base.experiment.scenarios.clear();
        base.experiment.lengths.clear();
        base.experiment.methods.clear();
        base.experiment.seeds.clear();
        base.train.scenario = Scenario::Fixed;
        base.train.path_length = 0;
        base.train.seed = 0;
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&base)?);
        if let Some(path) = &self.world.influence_csv {
            hasher.update(std::fs::read(path)?);
        }
        Ok(hex::encode(&hasher.finalize()[..8]))
    }
}
