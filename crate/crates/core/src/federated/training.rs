//! End-to-end single-run training pipeline: data synthesis, featurization
//! and scaling, agent construction, the round loop, and checkpoints.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, fedavg_round, flgames_round, partition_indices, AgentState, Algorithm, EvalSplit,
    RoundMetrics, ServerState, TrainerConfig,
};
use crate::environments::{
    featurize_geo, featurize_raw, fit_scaler, generate_dataset, ConfigClassSet, Dataset,
    EnvironmentSpec, Scaler, ScalerKind,
};
use crate::error::{Error, Result};
use crate::nn::{
    checkpoint::MlpCheckpoint, init_params, Activation, EnsembleMode, MlpParams, MlpSpec,
};
use crate::seeding::{derive_seed, domain, substream};

/// Default convergence-detector window in rounds.
pub const CONVERGENCE_WINDOW: usize = 50;
/// Default convergence-detector tolerance in accuracy points.
pub const CONVERGENCE_TOLERANCE: f64 = 0.01;

/// Split names in the metrics stream.
pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_IN_DIST: &str = "in_dist";
pub const SPLIT_OOD: &str = "ood";

/// Dataset sizing for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training samples generated per training environment, aligned with
    /// `RunSetup::train_envs`.
    pub train_per_env: Vec<usize>,
    /// Fresh same-distribution evaluation samples per training environment.
    pub eval_in_per_env: usize,
    /// Held-out environment evaluation samples.
    pub eval_ood: usize,
    /// Agents sharing each training environment's data.
    pub agents_per_env: usize,
    /// Seed for the evaluation sets; fixed by default so every run of an
    /// experiment grades against the same test data.
    pub eval_seed: u64,
}

impl DataConfig {
    pub fn new(train_per_env: Vec<usize>) -> Self {
        Self {
            train_per_env,
            eval_in_per_env: 500,
            eval_ood: 1000,
            agents_per_env: 1,
            eval_seed: 0x00e7_a15e,
        }
    }
}

/// Network shapes of the three algorithm families. Input and output widths
/// are determined at run time by the channel dimension and the number of
/// configuration classes; these lists give the remaining layer widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Extractor widths after the raw input, last entry is the
    /// representation width (identity output).
    pub extractor_dims: Vec<usize>,
    /// Hidden widths of the predictor head behind the extractor.
    pub v_head_hidden: Vec<usize>,
    /// Hidden widths of the fixed-feature predictor.
    pub f_hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            extractor_dims: vec![64, 16],
            v_head_hidden: vec![8],
            f_hidden: vec![32, 16],
            hidden_activation: Activation::Elu,
        }
    }
}

impl ArchConfig {
    fn stack(&self, dims: Vec<usize>) -> MlpSpec {
        let n_layers = dims.len() - 1;
        let mut activations = vec![self.hidden_activation; n_layers];
        activations[n_layers - 1] = Activation::Identity;
        MlpSpec::new(dims, activations).expect("validated dims")
    }

    /// Learned extractor: raw features -> extractor_dims, identity output.
    pub fn extractor_spec(&self, raw_dim: usize) -> MlpSpec {
        let mut dims = vec![raw_dim];
        dims.extend(&self.extractor_dims);
        self.stack(dims)
    }

    /// Predictor head consuming the extractor's representation.
    pub fn v_head_spec(&self, num_classes: usize) -> MlpSpec {
        let mut dims = vec![*self.extractor_dims.last().expect("non-empty")];
        dims.extend(&self.v_head_hidden);
        dims.push(num_classes);
        self.stack(dims)
    }

    /// Fixed-feature predictor over the 6 geometric features.
    pub fn f_predictor_spec(&self, num_classes: usize) -> MlpSpec {
        let mut dims = vec![6];
        dims.extend(&self.f_hidden);
        dims.push(num_classes);
        self.stack(dims)
    }

    /// FedAVG end-to-end network: the extractor fused with the head.
    pub fn fedavg_spec(&self, raw_dim: usize, num_classes: usize) -> MlpSpec {
        self.extractor_spec(raw_dim)
            .compose(&self.v_head_spec(num_classes))
            .expect("widths align by construction")
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractor_dims.is_empty() {
            return Err(Error::config("arch.extractor_dims must be non-empty"));
        }
        if self
            .extractor_dims
            .iter()
            .chain(&self.v_head_hidden)
            .chain(&self.f_hidden)
            .any(|&d| d == 0)
        {
            return Err(Error::config("arch layer widths must be positive"));
        }
        Ok(())
    }
}

/// Environments and sizing of one training run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub train_envs: Vec<EnvironmentSpec>,
    pub ood_env: EnvironmentSpec,
    pub classes: ConfigClassSet,
    pub data: DataConfig,
    pub arch: ArchConfig,
}

impl RunSetup {
    /// Deployment defaults: train on environments 1 and 2, hold out 3.
    pub fn default_with(data: DataConfig) -> Self {
        let mut envs = crate::environments::default_environments();
        let ood_env = envs.pop().expect("three environments");
        let n = envs[0].geometry.num_elements();
        Self {
            train_envs: envs,
            ood_env,
            classes: ConfigClassSet::two_class(n),
            data,
            arch: ArchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_envs.is_empty() {
            return Err(Error::config("at least one training environment required"));
        }
        if self.data.train_per_env.len() != self.train_envs.len() {
            return Err(Error::config(format!(
                "data.train_per_env has {} entries for {} training environments",
                self.data.train_per_env.len(),
                self.train_envs.len()
            )));
        }
        if self.data.agents_per_env == 0 {
            return Err(Error::config("data.agents_per_env must be >= 1"));
        }
        for env in self.train_envs.iter().chain([&self.ood_env]) {
            env.validate()?;
        }
        if self.data.eval_ood == 0 || self.data.eval_in_per_env == 0 {
            return Err(Error::config("evaluation split sizes must be >= 1"));
        }
        self.arch.validate()
    }
}

/// Output of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub server: ServerState,
    pub scaler: Scaler,
    pub agent_sizes: Vec<usize>,
}

fn feature_matrix(samples: &[&crate::environments::CsiSample], raw: bool) -> Array2<f64> {
    let rows = samples.len();
    let cols = if raw {
        4 * samples[0].h.len()
    } else {
        6
    };
    let mut out = Array2::zeros((rows, cols));
    for (i, s) in samples.iter().enumerate() {
        let v = if raw { featurize_raw(s) } else { featurize_geo(s) };
        for (j, x) in v.into_iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    out
}

struct PreparedSplit {
    features: Array2<f64>,
    labels: Vec<usize>,
    gains: Vec<Vec<f64>>,
}

fn prepare_split(datasets: &[&Dataset], raw: bool, scaler: &Scaler) -> Result<PreparedSplit> {
    let samples: Vec<&crate::environments::CsiSample> = datasets
        .iter()
        .flat_map(|d| d.samples.iter())
        .collect();
    let features = crate::environments::apply_scaler(
        scaler,
        feature_matrix(&samples, raw).view(),
    )?;
    Ok(PreparedSplit {
        features,
        labels: samples.iter().map(|s| s.label).collect(),
        gains: samples.iter().map(|s| s.per_config_gains.clone()).collect(),
    })
}

/// Runs one full training run; a pure function of (setup, cfg).
pub fn run_training(setup: &RunSetup, cfg: &TrainerConfig) -> Result<RunOutput> {
    setup.validate()?;
    cfg.validate()?;
    let raw = !matches!(cfg.algorithm, Algorithm::FFlGames);

    // Data synthesis. Training data depends on the run seed; evaluation data
    // on the dedicated eval seed.
    let train_seed = derive_seed(cfg.seed, domain::DATASET);
    let train_sets: Vec<Dataset> = setup
        .train_envs
        .iter()
        .zip(&setup.data.train_per_env)
        .map(|(env, &count)| generate_dataset(env, &setup.classes, count, train_seed))
        .collect::<Result<_>>()?;
    let eval_seed = derive_seed(setup.data.eval_seed, domain::EVAL_DATA);
    let eval_in_sets: Vec<Dataset> = setup
        .train_envs
        .iter()
        .map(|env| generate_dataset(env, &setup.classes, setup.data.eval_in_per_env, eval_seed))
        .collect::<Result<_>>()?;
    let eval_ood = generate_dataset(&setup.ood_env, &setup.classes, setup.data.eval_ood, eval_seed)?;

    // Scaler fitted on the pooled training features only.
    let pooled: Vec<&crate::environments::CsiSample> =
        train_sets.iter().flat_map(|d| d.samples.iter()).collect();
    let kind = if raw {
        ScalerKind::Standard
    } else {
        ScalerKind::MinMax
    };
    let scaler = fit_scaler(kind, feature_matrix(&pooled, raw).view())?;

    // Partition each environment's data across its agents.
    let partition_seed = derive_seed(cfg.seed, domain::PARTITION);
    let mut agent_inputs: Vec<(u32, Vec<usize>, &Dataset)> = Vec::new();
    for ds in &train_sets {
        let mut rng = substream(partition_seed, domain::PARTITION, ds.environment_id as u64, 0);
        for part in partition_indices(ds.len(), setup.data.agents_per_env, &mut rng)? {
            agent_inputs.push((ds.environment_id, part, ds));
        }
    }

    let num_classes = setup.classes.len();
    let init_seed = derive_seed(cfg.seed, domain::INIT);
    let raw_dim = 4 * setup.train_envs[0].geometry.num_elements();

    let mut agents = Vec::with_capacity(agent_inputs.len());
    for (agent_id, (env_id, indices, ds)) in agent_inputs.iter().enumerate() {
        let samples: Vec<&crate::environments::CsiSample> =
            indices.iter().map(|&i| &ds.samples[i]).collect();
        let features =
            crate::environments::apply_scaler(&scaler, feature_matrix(&samples, raw).view())?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let predictor = match cfg.algorithm {
            Algorithm::FedAvg => {
                init_params(&setup.arch.fedavg_spec(raw_dim, num_classes), init_seed)
            }
            Algorithm::VFlGames => init_params(
                &setup.arch.v_head_spec(num_classes),
                derive_seed(init_seed, 1 + agent_id as u64),
            ),
            Algorithm::FFlGames => init_params(
                &setup.arch.f_predictor_spec(num_classes),
                derive_seed(init_seed, 1 + agent_id as u64),
            ),
        };
        agents.push(AgentState::new(
            agent_id,
            *env_id,
            features,
            labels,
            predictor,
            cfg.seed,
        )?);
    }
    let agent_sizes: Vec<usize> = agents.iter().map(|a| a.dataset_size()).collect();
    let weights: Vec<f64> = agent_sizes.iter().map(|&s| s as f64).collect();

    let mut server = match cfg.algorithm {
        Algorithm::FedAvg => ServerState {
            extractor: None,
            predictors: vec![init_params(
                &setup.arch.fedavg_spec(raw_dim, num_classes),
                init_seed,
            )],
            weights,
            round: 0,
        },
        Algorithm::VFlGames => ServerState {
            extractor: Some(init_params(
                &setup.arch.extractor_spec(raw_dim),
                derive_seed(init_seed, 0),
            )),
            predictors: agents.iter().map(|a| a.predictor.clone()).collect(),
            weights,
            round: 0,
        },
        Algorithm::FFlGames => ServerState {
            extractor: None,
            predictors: agents.iter().map(|a| a.predictor.clone()).collect(),
            weights,
            round: 0,
        },
    };
    server.validate()?;

    // Evaluation splits, prepared once.
    let train_refs: Vec<&Dataset> = train_sets.iter().collect();
    let in_refs: Vec<&Dataset> = eval_in_sets.iter().collect();
    let splits = {
        let train = prepare_split(&train_refs, raw, &scaler)?;
        let in_dist = prepare_split(&in_refs, raw, &scaler)?;
        let ood = prepare_split(&[&eval_ood], raw, &scaler)?;
        vec![
            EvalSplit {
                name: SPLIT_TRAIN.to_string(),
                features: train.features,
                labels: train.labels,
                per_config_gains: train.gains,
                power_ratio: setup.train_envs[0].power_ratio,
            },
            EvalSplit {
                name: SPLIT_IN_DIST.to_string(),
                features: in_dist.features,
                labels: in_dist.labels,
                per_config_gains: in_dist.gains,
                power_ratio: setup.train_envs[0].power_ratio,
            },
            EvalSplit {
                name: SPLIT_OOD.to_string(),
                features: ood.features,
                labels: ood.labels,
                per_config_gains: ood.gains,
                power_ratio: setup.ood_env.power_ratio,
            },
        ]
    };

    let mut metrics = Vec::new();
    let started = std::time::Instant::now();
    for round in 1..=cfg.rounds {
        match cfg.algorithm {
            Algorithm::FedAvg => fedavg_round(&mut server, &mut agents, cfg)?,
            Algorithm::FFlGames | Algorithm::VFlGames => {
                flgames_round(&mut server, &mut agents, cfg)?
            }
        }
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let split_metrics = evaluate(&server, &splits, cfg.ensemble_mode)?;
            metrics.push(RoundMetrics {
                round,
                splits: split_metrics,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }

    Ok(RunOutput {
        metrics,
        server,
        scaler,
        agent_sizes,
    })
}

pub const TRAINING_CHECKPOINT_VERSION: u32 = 1;

/// Evaluation-ready snapshot of a trained server: models, aggregation
/// weights, and the fitted scaler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub ensemble_mode: EnsembleMode,
    pub extractor: Option<MlpCheckpoint>,
    pub predictors: Vec<MlpCheckpoint>,
    pub weights: Vec<f64>,
    pub scaler: Scaler,
    pub config_hash: String,
}

impl TrainingCheckpoint {
    pub fn from_run(
        algorithm: Algorithm,
        ensemble_mode: EnsembleMode,
        output: &RunOutput,
        config_hash: &str,
    ) -> Self {
        Self {
            version: TRAINING_CHECKPOINT_VERSION,
            algorithm,
            ensemble_mode,
            extractor: output
                .server
                .extractor
                .as_ref()
                .map(MlpCheckpoint::from_params),
            predictors: output
                .server
                .predictors
                .iter()
                .map(MlpCheckpoint::from_params)
                .collect(),
            weights: output.server.weights.clone(),
            scaler: output.scaler.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn into_server(self) -> Result<(ServerState, Scaler, Algorithm, EnsembleMode)> {
        if self.version != TRAINING_CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let extractor = self.extractor.map(MlpCheckpoint::into_params).transpose()?;
        let predictors: Vec<MlpParams> = self
            .predictors
            .into_iter()
            .map(MlpCheckpoint::into_params)
            .collect::<Result<_>>()?;
        let server = ServerState {
            extractor,
            predictors,
            weights: self.weights,
            round: 0,
        };
        server.validate()?;
        Ok((server, self.scaler, self.algorithm, self.ensemble_mode))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Rebuilds the evaluation splits of a setup for checkpoint-based evaluation.
pub fn build_eval_splits(
    setup: &RunSetup,
    algorithm: Algorithm,
    scaler: &Scaler,
) -> Result<Vec<EvalSplit>> {
    setup.validate()?;
    let raw = !matches!(algorithm, Algorithm::FFlGames);
    let eval_seed = derive_seed(setup.data.eval_seed, domain::EVAL_DATA);
    let eval_in_sets: Vec<Dataset> = setup
        .train_envs
        .iter()
        .map(|env| generate_dataset(env, &setup.classes, setup.data.eval_in_per_env, eval_seed))
        .collect::<Result<_>>()?;
    let eval_ood = generate_dataset(&setup.ood_env, &setup.classes, setup.data.eval_ood, eval_seed)?;
    let in_refs: Vec<&Dataset> = eval_in_sets.iter().collect();
    let in_dist = prepare_split(&in_refs, raw, scaler)?;
    let ood = prepare_split(&[&eval_ood], raw, scaler)?;
    Ok(vec![
        EvalSplit {
            name: SPLIT_IN_DIST.to_string(),
            features: in_dist.features,
            labels: in_dist.labels,
            per_config_gains: in_dist.gains,
            power_ratio: setup.train_envs[0].power_ratio,
        },
        EvalSplit {
            name: SPLIT_OOD.to_string(),
            features: ood.features,
            labels: ood.labels,
            per_config_gains: ood.gains,
            power_ratio: setup.ood_env.power_ratio,
        },
    ])
}

/// Mean metric over the final `window` rounds of a metrics series.
pub fn final_window_mean(
    metrics: &[RoundMetrics],
    split: &str,
    window_rounds: usize,
    value: impl Fn(&super::SplitMetrics) -> f64,
) -> Option<f64> {
    let last_round = metrics.last()?.round;
    let lo = last_round.saturating_sub(window_rounds);
    let vals: Vec<f64> = metrics
        .iter()
        .filter(|m| m.round > lo)
        .filter_map(|m| m.split(split).map(&value))
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}
