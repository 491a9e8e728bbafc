//! Builds the labeled agent population: trains many PPO agents on distinct
//! seeds, scores each on never-seen noisy environments, and persists a
//! reproducible manifest.
//!
//! Every agent's randomness derives from its own seed stream, so a pool of
//! workers produces exactly the same dataset as a serial run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{load_snapshot, save_snapshot, FeatureError, WeightSnapshot};
use crate::grid::{generate, GridError, GridSpec, NoiseConfig, Variant};
use crate::ppo::{train, PolicyNet, PpoConfig, PpoError};
use crate::rng::{fnv1a64, mix_seed};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error("weight file missing for agent {0}")]
    MissingWeights(String),
    #[error("weight file hash mismatch for agent {0}")]
    HashMismatch(String),
    #[error("manifest format version {0} unsupported")]
    VersionUnsupported(u32),
    #[error(transparent)]
    Env(#[from] GridError),
    #[error(transparent)]
    Net(#[from] crate::nn::NnError),
    #[error(transparent)]
    Trainer(#[from] PpoError),
    #[error(transparent)]
    Weights(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Greedy-policy generalization score: the mean episode return over the
/// evaluation environments, observations perturbed by `noise` when given.
///
/// The noise draw index packs the episode slot in the high 32 bits and the
/// step index in the low 32, so every (environment, episode, step) triple
/// sees an independent, reproducible perturbation.
pub fn compute_zeta(
    policy: &PolicyNet,
    eval_specs: &[GridSpec],
    noise: Option<&NoiseConfig>,
    episodes_per_env: usize,
) -> Result<f64, ForgeError> {
    if eval_specs.is_empty() {
        return Err(ForgeError::EmptyEvalSet);
    }
    if let Some(cfg) = noise {
        cfg.validate()?;
    }
    let episodes = episodes_per_env.max(1);
    let mut total = 0.0;
    for (env_idx, spec) in eval_specs.iter().enumerate() {
        let mut world = generate(spec)?;
        let mut env_return = 0.0;
        for ep in 0..episodes {
            let slot = (env_idx * episodes + ep) as u64;
            let mut obs = world.reset();
            let mut step: u64 = 0;
            loop {
                let seen = match noise {
                    Some(cfg) => crate::grid::apply_noise(&obs, cfg, (slot << 32) | step),
                    None => obs.clone(),
                };
                let action = policy.greedy_action(seen.values())?;
                let outcome = world.step(action)?;
                env_return += outcome.reward;
                step += 1;
                if outcome.done {
                    break;
                }
                obs = outcome.obs;
            }
        }
        total += env_return / episodes as f64;
    }
    Ok(total / eval_specs.len() as f64)
}

/// Dataset-generation parameters. Training seeds are `train_seed_base + i`
/// for agent `i`, evaluation seeds `eval_seed_base + j`; the two ranges must
/// be disjoint. When `step_tiers` is nonempty agent `i` trains for
/// `step_tiers[i % len]` steps, which widens the spread of generalization
/// scores; otherwise every agent gets `steps_per_agent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub n_agents: usize,
    pub steps_per_agent: u64,
    #[serde(default)]
    pub step_tiers: Vec<u64>,
    pub variant: Variant,
    pub train_seed_base: u64,
    pub n_eval_envs: usize,
    pub eval_seed_base: u64,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            n_agents: 200,
            steps_per_agent: 200_000,
            step_tiers: Vec::new(),
            variant: Variant::Crossing,
            train_seed_base: 0,
            n_eval_envs: 100,
            eval_seed_base: 1_000_000,
            noise: NoiseConfig { amplitude: 0.05, seed: 424_242 },
            ppo: PpoConfig::default(),
        }
    }
}

/// Half-open seed range, used for the disjointness checks.
pub fn ranges_disjoint(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 + a.1 <= b.0 || b.0 + b.1 <= a.0
}

impl ForgeConfig {
    pub fn steps_for_agent(&self, index: usize) -> u64 {
        if self.step_tiers.is_empty() {
            self.steps_per_agent
        } else {
            self.step_tiers[index % self.step_tiers.len()]
        }
    }

    pub fn train_range(&self) -> (u64, u64) {
        (self.train_seed_base, self.n_agents as u64)
    }

    pub fn eval_range(&self) -> (u64, u64) {
        (self.eval_seed_base, self.n_eval_envs as u64)
    }

    pub fn eval_specs(&self) -> Vec<GridSpec> {
        (0..self.n_eval_envs)
            .map(|j| GridSpec {
                seed: self.eval_seed_base + j as u64,
                variant: self.variant,
                ..GridSpec::default()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.n_agents == 0 {
            return Err(ForgeError::InvalidConfig("n_agents must be >= 1".into()));
        }
        if self.n_eval_envs == 0 {
            return Err(ForgeError::InvalidConfig("n_eval_envs must be >= 1".into()));
        }
        if !ranges_disjoint(self.train_range(), self.eval_range()) {
            return Err(ForgeError::InvalidConfig(format!(
                "train seeds {:?} overlap eval seeds {:?}",
                self.train_range(),
                self.eval_range()
            )));
        }
        self.noise.validate()?;
        self.ppo.validate()?;
        Ok(())
    }

    /// Stable hash of the serialized config, recorded per agent.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Provenance and label of one forged agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    pub train_seed: u64,
    pub steps: u64,
    pub weights_path: String,
    pub weights_hash: String,
    pub zeta: f64,
    pub eval_seed_base: u64,
    pub n_eval_envs: usize,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    #[serde(default)]
    pub error: Option<String>,
}

const MANIFEST_VERSION: u32 = 1;

/// The dataset: its config and one record per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: ForgeConfig,
    pub records: Vec<AgentRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), ForgeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Records without a per-agent failure.
    pub fn ok_records(&self) -> impl Iterator<Item = &AgentRecord> {
        self.records.iter().filter(|r| r.error.is_none())
    }

    /// Strips wall-clock timing, leaving only the reproducible content.
    pub fn normalized(&self) -> DatasetManifest {
        let mut copy = self.clone();
        for r in &mut copy.records {
            r.wall_clock_secs = 0.0;
        }
        copy
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ForgeError> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ForgeError::VersionUnsupported(manifest.version));
    }
    Ok(manifest)
}

/// Re-checks a manifest against the files on disk: weight files must exist,
/// hash to their recorded values, round-trip through the loader, and carry
/// labels in [0, 1]. `base_dir` anchors the relative weight paths.
pub fn verify_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Result<(), ForgeError> {
    let mut seen = std::collections::BTreeSet::new();
    for record in manifest.ok_records() {
        if !seen.insert(&record.id) {
            return Err(ForgeError::InvalidConfig(format!("duplicate agent id {}", record.id)));
        }
        if !(0.0..=1.0).contains(&record.zeta) {
            return Err(ForgeError::InvalidConfig(format!(
                "agent {} has zeta {} outside [0,1]",
                record.id, record.zeta
            )));
        }
        let path = base_dir.join(&record.weights_path);
        if !path.is_file() {
            return Err(ForgeError::MissingWeights(record.id.clone()));
        }
        let bytes = std::fs::read(&path)?;
        let hash = format!("{:016x}", fnv1a64(&bytes));
        if hash != record.weights_hash {
            return Err(ForgeError::HashMismatch(record.id.clone()));
        }
        let snapshot = load_snapshot(&path)?;
        let hidden = manifest.config.ppo.hidden;
        let expected = [
            (crate::grid::OBS_LEN, hidden),
            (hidden, hidden),
            (hidden, crate::grid::NUM_ACTIONS),
        ];
        for (layer, (rows, cols)) in snapshot.layers.iter().zip(expected) {
            if layer.rows() != rows || layer.cols() != cols {
                return Err(ForgeError::InvalidConfig(format!(
                    "agent {} snapshot shape {}x{} does not match config ({}x{})",
                    record.id,
                    layer.rows(),
                    layer.cols(),
                    rows,
                    cols
                )));
            }
        }
    }
    Ok(())
}

/// Loads the snapshot of one record.
pub fn load_agent_snapshot(
    record: &AgentRecord,
    base_dir: &Path,
) -> Result<WeightSnapshot, ForgeError> {
    let path = base_dir.join(&record.weights_path);
    if !path.is_file() {
        return Err(ForgeError::MissingWeights(record.id.clone()));
    }
    let mut snapshot = load_snapshot(&path)?;
    snapshot.agent_id = record.id.clone();
    Ok(snapshot)
}

/// Trains, evaluates and persists every agent in the config, returning the
/// manifest. Agents run on the current rayon pool; records come back in
/// agent order regardless of scheduling. Per-agent failures are recorded in
/// the manifest rather than aborting the run.
pub fn forge(config: &ForgeConfig, out_dir: &Path) -> Result<DatasetManifest, ForgeError> {
    config.validate()?;
    let weights_dir = out_dir.join("weights");
    std::fs::create_dir_all(&weights_dir)?;
    let eval_specs = config.eval_specs();
    let config_hash = config.content_hash();

    let records: Vec<AgentRecord> = (0..config.n_agents)
        .into_par_iter()
        .map(|i| forge_one(config, i, &eval_specs, &weights_dir, &config_hash))
        .collect();

    let manifest =
        DatasetManifest { version: MANIFEST_VERSION, config: config.clone(), records };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn forge_one(
    config: &ForgeConfig,
    index: usize,
    eval_specs: &[GridSpec],
    weights_dir: &Path,
    config_hash: &str,
) -> AgentRecord {
    let start = Instant::now();
    let id = format!("agent_{index:04}");
    let train_seed = config.train_seed_base + index as u64;
    let steps = config.steps_for_agent(index);
    let mut record = AgentRecord {
        id: id.clone(),
        train_seed,
        steps,
        weights_path: format!("weights/{id}.rlwb"),
        weights_hash: String::new(),
        zeta: 0.0,
        eval_seed_base: config.eval_seed_base,
        n_eval_envs: config.n_eval_envs,
        wall_clock_secs: 0.0,
        config_hash: config_hash.to_string(),
        error: None,
    };

    let result = (|| -> Result<(f64, PathBuf), ForgeError> {
        let spec = GridSpec { seed: train_seed, variant: config.variant, ..GridSpec::default() };
        // Standard PPO for dataset agents; each gets its own seed stream.
        let cfg = PpoConfig { c3: 0.0, seed: mix_seed(config.train_seed_base, index as u64), ..config.ppo.clone() };
        let trained = train(&spec, &cfg, None, steps, None)?;
        let zeta = compute_zeta(&trained.policy, eval_specs, Some(&config.noise), 1)?;
        let path = weights_dir.join(format!("{id}.rlwb"));
        save_snapshot(&path, &trained.policy.snapshot(&id))?;
        Ok((zeta, path))
    })();

    match result {
        Ok((zeta, path)) => {
            record.zeta = zeta;
            let bytes = std::fs::read(&path).unwrap_or_default();
            record.weights_hash = format!("{:016x}", fnv1a64(&bytes));
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    record
}
