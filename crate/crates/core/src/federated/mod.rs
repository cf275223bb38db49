//! Federated training over simulated agents: FedAVG and the parallel
//! best-response game in its fixed-feature and learned-extractor variants.
//!
//! Agents hold their data; the server sees only parameter and gradient
//! containers. Within a round agents run independently against the broadcast
//! round-start state; aggregation reduces in ascending agent order, so
//! results do not depend on scheduling.

mod metrics;
pub mod training;

pub use metrics::{read_metrics_csv, write_metrics_csv, RoundMetrics, SplitMetrics};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    backward, cross_entropy, ensemble_logits, forward, forward_logits, gd_step, sgd_step,
    weighted_average, EnsembleMode, Gradients, MlpParams,
};
use crate::seeding::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    /// Game over predictors on fixed geometric features.
    FFlGames,
    /// Game over predictors behind a learned extractor.
    VFlGames,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FFlGames => "f_flgames",
            Algorithm::VFlGames => "v_flgames",
        }
    }

    pub fn all() -> [Algorithm; 3] {
        [Algorithm::FedAvg, Algorithm::FFlGames, Algorithm::VFlGames]
    }
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Predictor SGD learning rate.
    pub eta_w: f64,
    /// Extractor GD learning rate.
    pub eta_phi: f64,
    /// Predictor minibatch size.
    pub minibatch: usize,
    pub rounds: usize,
    /// Consecutive local predictor steps per round.
    pub local_steps: usize,
    pub ensemble_mode: EnsembleMode,
    pub seed: u64,
    /// Evaluate every k-th round (the final round is always evaluated).
    pub eval_every: usize,
}

impl TrainerConfig {
    pub fn new(algorithm: Algorithm, rounds: usize, seed: u64) -> Self {
        Self {
            algorithm,
            eta_w: 2e-3,
            eta_phi: 5e-4,
            minibatch: 32,
            rounds,
            local_steps: 1,
            ensemble_mode: EnsembleMode::Function,
            seed,
            eval_every: 1,
        }
    }

    /// Zero learning rates are valid here (they freeze the corresponding
    /// parameters); experiment-level configs enforce strict positivity.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_w >= 0.0) || !(self.eta_phi >= 0.0) {
            return Err(Error::config("learning rates must be >= 0"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("minibatch must be >= 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// One federated agent: its local featurized data, its predictor, and its
/// epoch-shuffled minibatch cursor.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub agent_id: usize,
    pub environment_id: u32,
    /// Scaled input features, one row per local sample.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub predictor: MlpParams,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl AgentState {
    pub fn new(
        agent_id: usize,
        environment_id: u32,
        features: Array2<f64>,
        labels: Vec<usize>,
        predictor: MlpParams,
        seed: u64,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::contract("agent dataset must be non-empty"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::contract("feature/label count mismatch"));
        }
        let mut agent = Self {
            agent_id,
            environment_id,
            features,
            labels,
            predictor,
            order: Vec::new(),
            cursor: 0,
            rng: substream(seed, domain::AGENT, agent_id as u64, 0),
        };
        agent.reshuffle();
        Ok(agent)
    }

    pub fn dataset_size(&self) -> usize {
        self.features.nrows()
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.dataset_size()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next minibatch of at most `m` rows under epoch-wise shuffling; a
    /// partial epoch tail is dropped in favor of a fresh shuffle.
    pub fn next_minibatch(&mut self, m: usize) -> (Array2<f64>, Vec<usize>) {
        let n = self.dataset_size();
        let take = m.min(n);
        if self.cursor + take > n {
            self.reshuffle();
        }
        let idx = &self.order[self.cursor..self.cursor + take];
        self.cursor += take;
        let cols = self.features.ncols();
        let batch = Array2::from_shape_fn((take, cols), |(r, c)| self.features[[idx[r], c]]);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (batch, labels)
    }
}

/// Server-side model state. FedAVG keeps a single global model in
/// `predictors[0]`; the game variants keep one predictor per agent, plus the
/// shared extractor for the learned-representation variant.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub extractor: Option<MlpParams>,
    pub predictors: Vec<MlpParams>,
    /// Aggregation weights proportional to the agents' dataset sizes.
    pub weights: Vec<f64>,
    pub round: usize,
}

impl ServerState {
    pub fn validate(&self) -> Result<()> {
        if self.predictors.is_empty() {
            return Err(Error::contract("server needs at least one predictor"));
        }
        let spec = self.predictors[0].spec();
        for p in &self.predictors[1..] {
            if p.spec() != spec {
                return Err(Error::contract("predictor shapes must all match"));
            }
        }
        if self.weights.len() != self.predictors.len() && self.predictors.len() > 1 {
            return Err(Error::contract("one weight per predictor required"));
        }
        Ok(())
    }
}

/// One FedAVG communication round: every agent takes `local_steps` minibatch
/// SGD steps from the broadcast global model on its local loss, then the
/// server replaces the global model with the size-weighted average.
///
/// Learning rates apply to batch-summed gradients (cross_entropy returns the
/// batch mean, so steps scale by the batch length). The stated rates only
/// reach convergence within the stated round budgets under this convention.
pub fn fedavg_round(
    server: &mut ServerState,
    agents: &mut [AgentState],
    cfg: &TrainerConfig,
) -> Result<()> {
    let global = server.predictors[0].clone();
    let locals: Vec<Result<MlpParams>> = crate::par::map_slice_mut(agents, |_, agent| {
        let mut model = global.clone();
        for _ in 0..cfg.local_steps {
            let (batch, labels) = agent.next_minibatch(cfg.minibatch);
            let step = cfg.eta_w * batch.nrows() as f64;
            let (logits, cache) = forward(&model, batch.view())?;
            let (_, dlogits) = cross_entropy(&logits, &labels)?;
            let grads = backward(&model, &cache, &dlogits)?;
            sgd_step(&mut model, &grads, step)?;
        }
        Ok(model)
    });
    let locals: Vec<MlpParams> = locals.into_iter().collect::<Result<_>>()?;
    let refs: Vec<&MlpParams> = locals.iter().collect();
    server.predictors[0] = weighted_average(&refs, &server.weights)?;
    server.round += 1;
    Ok(())
}

/// One round of the parallel best-response game.
///
/// Phase A (learned-extractor variant only): each agent computes the
/// full-dataset extractor gradient of its ensemble loss; the server applies
/// one size-weighted GD step and broadcasts the extractor.
///
/// Phase B: each agent, against the frozen round-start opponent predictors,
/// takes `local_steps` minibatch SGD steps on its own predictor under the
/// ensemble loss; the server then rebroadcasts all predictors.
pub fn flgames_round(
    server: &mut ServerState,
    agents: &mut [AgentState],
    cfg: &TrainerConfig,
) -> Result<()> {
    if agents.len() != server.predictors.len() {
        return Err(Error::contract("one predictor per agent required"));
    }
    let weights = server.weights.clone();
    let total_weight: f64 = weights.iter().sum();

    // Phase A: extractor GD step over full local datasets. Each agent's
    // gradient is the batch-summed cross-entropy gradient over its dataset.
    if let Some(extractor) = server.extractor.clone() {
        let snapshot: Vec<&MlpParams> = server.predictors.iter().collect();
        let grads: Vec<Result<Gradients>> = crate::par::map_slice_mut(agents, |_, agent| {
            let (z, cache_ext) = forward(&extractor, agent.features.view())?;
            let (_, dlogits) = {
                let logits =
                    ensemble_logits(&snapshot, &weights, z.view(), cfg.ensemble_mode)?;
                cross_entropy(&logits, &agent.labels)?
            };
            // Chain the ensemble gradient back to the representation.
            let dz = match cfg.ensemble_mode {
                EnsembleMode::Function => {
                    let mut acc = Array2::zeros(z.dim());
                    for (pred, &w) in snapshot.iter().zip(&weights) {
                        let (_, cache_p) = forward(pred, z.view())?;
                        let g = backward(pred, &cache_p, &dlogits)?;
                        acc.scaled_add(w / total_weight, &g.inputs);
                    }
                    acc
                }
                EnsembleMode::Parameter => {
                    let avg = weighted_average(&snapshot, &weights)?;
                    let (_, cache_p) = forward(&avg, z.view())?;
                    backward(&avg, &cache_p, &dlogits)?.inputs
                }
            };
            backward(&extractor, &cache_ext, &dz)
        });
        let grads: Vec<Gradients> = grads.into_iter().collect::<Result<_>>()?;
        let mut total = Gradients::zeros_like(&extractor);
        for ((g, &w), agent) in grads.iter().zip(&weights).zip(agents.iter()) {
            // Batch-mean to batch-sum, then the size-weighted aggregation.
            total.add_scaled(g, agent.dataset_size() as f64 * w / total_weight)?;
        }
        let mut updated = extractor;
        gd_step(&mut updated, &total, cfg.eta_phi)?;
        server.extractor = Some(updated);
    }

    // Phase B: parallel best response against round-start opponents.
    let snapshot = server.predictors.clone();
    let extractor = server.extractor.clone();
    let new_predictors: Vec<Result<MlpParams>> =
        crate::par::map_slice_mut(agents, |idx, agent| {
            let own_weight = weights[idx] / total_weight;
            let mut own = snapshot[idx].clone();
            for _ in 0..cfg.local_steps {
                let (batch, labels) = agent.next_minibatch(cfg.minibatch);
                let step = cfg.eta_w * batch.nrows() as f64;
                let z = match &extractor {
                    Some(ext) => forward_logits(ext, batch.view())?,
                    None => batch,
                };
                let own_grads = match cfg.ensemble_mode {
                    EnsembleMode::Function => {
                        let (own_logits, cache_own) = forward(&own, z.view())?;
                        let mut ens = own_logits * own_weight;
                        for (n, (pred, &w)) in snapshot.iter().zip(&weights).enumerate() {
                            if n != idx {
                                let logits = forward_logits(pred, z.view())?;
                                ens.scaled_add(w / total_weight, &logits);
                            }
                        }
                        let (_, dlogits) = cross_entropy(&ens, &labels)?;
                        let mut g = backward(&own, &cache_own, &(dlogits * own_weight))?;
                        g.inputs = Array2::zeros((0, 0));
                        g
                    }
                    EnsembleMode::Parameter => {
                        let mut members: Vec<&MlpParams> = snapshot.iter().collect();
                        members[idx] = &own;
                        let avg = weighted_average(&members, &weights)?;
                        let (logits, cache) = forward(&avg, z.view())?;
                        let (_, dlogits) = cross_entropy(&logits, &labels)?;
                        let mut g = backward(&avg, &cache, &dlogits)?;
                        g.scale(own_weight);
                        g
                    }
                };
                sgd_step(&mut own, &own_grads, step)?;
            }
            Ok(own)
        });
    server.predictors = new_predictors.into_iter().collect::<Result<_>>()?;
    server.round += 1;
    Ok(())
}

/// Splits a dataset into `k` random near-equal disjoint parts.
pub fn partition_environment(
    dataset: &Dataset,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Dataset>> {
    let indices = partition_indices(dataset.len(), k, rng)?;
    Ok(indices
        .into_iter()
        .map(|part| Dataset {
            environment_id: dataset.environment_id,
            samples: part.iter().map(|&i| dataset.samples[i].clone()).collect(),
        })
        .collect())
}

/// Index partition behind `partition_environment`: a shuffled 0..n split
/// into k chunks whose sizes differ by at most one.
pub fn partition_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::contract("partition requires k >= 1"));
    }
    if k > n {
        return Err(Error::contract(format!(
            "cannot split {n} samples across {k} agents"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / k;
    let rem = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for part in 0..k {
        let size = base + usize::from(part < rem);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// One evaluation split: features prepared for the algorithm under test,
/// oracle labels, per-configuration gains, and the link power ratio.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub per_config_gains: Vec<Vec<f64>>,
    pub power_ratio: f64,
}

/// Model predictions on a feature batch under the server's current state.
pub fn predict_labels(
    server: &ServerState,
    features: ndarray::ArrayView2<f64>,
    mode: EnsembleMode,
) -> Result<Vec<usize>> {
    // A single global model (FedAVG) bypasses the ensemble weighting.
    let ensemble_weights = if server.predictors.len() == 1 {
        vec![1.0]
    } else {
        server.weights.clone()
    };
    let logits = match &server.extractor {
        Some(ext) => {
            let z = forward_logits(ext, features)?;
            let preds: Vec<&MlpParams> = server.predictors.iter().collect();
            ensemble_logits(&preds, &ensemble_weights, z.view(), mode)?
        }
        None => {
            let preds: Vec<&MlpParams> = server.predictors.iter().collect();
            ensemble_logits(&preds, &ensemble_weights, features, mode)?
        }
    };
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Accuracy and spectral-efficiency metrics of the current model on each
/// split. SE_pred uses the predicted configuration, SE_best the oracle label,
/// SE_random the analytic mean over the configuration set.
pub fn evaluate(
    server: &ServerState,
    splits: &[EvalSplit],
    mode: EnsembleMode,
) -> Result<Vec<SplitMetrics>> {
    splits
        .iter()
        .map(|split| {
            let preds = predict_labels(server, split.features.view(), mode)?;
            let n = preds.len() as f64;
            let mut correct = 0usize;
            let mut se_pred = 0.0;
            let mut se_best = 0.0;
            let mut se_random = 0.0;
            for (i, &pred) in preds.iter().enumerate() {
                let gains = &split.per_config_gains[i];
                if pred == split.labels[i] {
                    correct += 1;
                }
                se_pred += crate::geometry::rate_from_gain(gains[pred], split.power_ratio);
                se_best +=
                    crate::geometry::rate_from_gain(gains[split.labels[i]], split.power_ratio);
                se_random += gains
                    .iter()
                    .map(|&g| crate::geometry::rate_from_gain(g, split.power_ratio))
                    .sum::<f64>()
                    / gains.len() as f64;
            }
            Ok(SplitMetrics {
                split: split.name.clone(),
                accuracy: correct as f64 / n,
                se_pred: se_pred / n,
                se_best: se_best / n,
                se_random: se_random / n,
            })
        })
        .collect()
}

/// First round at which the trailing `window` rounds of out-of-distribution
/// accuracy span at most `tolerance`. `series` pairs round numbers with OoD
/// accuracy, in increasing round order.
pub fn convergence_round(
    series: &[(usize, f64)],
    window: usize,
    tolerance: f64,
) -> Option<usize> {
    if window < 2 {
        return None;
    }
    for (t, &(round, _)) in series.iter().enumerate() {
        if round < window {
            continue;
        }
        let lo = round - window;
        let in_window: Vec<f64> = series[..=t]
            .iter()
            .rev()
            .take_while(|(r, _)| *r > lo)
            .map(|&(_, a)| a)
            .collect();
        if in_window.len() < 2 {
            continue;
        }
        let max = in_window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = in_window.iter().copied().fold(f64::INFINITY, f64::min);
        if max - min <= tolerance {
            return Some(round);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, MlpSpec};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn toy_agent(id: usize, features: Array2<f64>, labels: Vec<usize>, seed: u64) -> AgentState {
        let spec = MlpSpec::elu_stack(vec![features.ncols(), 2]).unwrap();
        let predictor = init_params(&spec, seed);
        AgentState::new(id, 1, features, labels, predictor, seed).unwrap()
    }

    #[test]
    fn minibatch_cycles_cover_the_dataset() {
        let features = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        let mut agent = toy_agent(0, features, (0..10).map(|i| i % 2).collect(), 3);
        let mut seen = std::collections::HashSet::new();
        let (batch, _) = agent.next_minibatch(4);
        for row in batch.rows() {
            seen.insert(row[0] as i64);
        }
        let (batch, _) = agent.next_minibatch(4);
        for row in batch.rows() {
            assert!(seen.insert(row[0] as i64), "epoch repeated a sample early");
        }
        // Third call would overrun the epoch tail: reshuffles.
        let (batch, labels) = agent.next_minibatch(4);
        assert_eq!(batch.nrows(), 4);
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn minibatch_larger_than_dataset_is_clamped() {
        let features = Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64);
        let mut agent = toy_agent(0, features, vec![0, 1, 0], 3);
        let (batch, labels) = agent.next_minibatch(32);
        assert_eq!(batch.nrows(), 3);
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn fedavg_zero_lr_keeps_model_constant() {
        let features = array![[1.0, 0.0], [0.0, 1.0]];
        let mut agents = vec![
            toy_agent(0, features.clone(), vec![0, 1], 1),
            toy_agent(1, features, vec![1, 0], 2),
        ];
        let spec = MlpSpec::elu_stack(vec![2, 2]).unwrap();
        let global = init_params(&spec, 7);
        let mut server = ServerState {
            extractor: None,
            predictors: vec![global.clone()],
            weights: vec![2.0, 2.0],
            round: 0,
        };
        let mut cfg = TrainerConfig::new(Algorithm::FedAvg, 1, 5);
        cfg.eta_w = 0.0;
        fedavg_round(&mut server, &mut agents, &cfg).unwrap();
        assert_eq!(server.predictors[0], global);
        assert_eq!(server.round, 1);
    }

    #[test]
    fn fedavg_round_matches_hand_computed_average() {
        // One linear layer, one sample per agent, single local step.
        let spec = MlpSpec::new(vec![1, 2], vec![crate::nn::Activation::Identity]).unwrap();
        let mut w0 = init_params(&spec, 11);
        w0.layers[0].weights = array![[0.4, -0.2]];
        w0.layers[0].bias = ndarray::arr1(&[0.1, -0.1]);

        let (x_a, y_a) = (1.5, 0usize);
        let (x_b, y_b) = (-0.7, 1usize);
        let mut agents = vec![
            toy_agent(0, array![[x_a]], vec![y_a], 1),
            toy_agent(1, array![[x_b]], vec![y_b], 2),
        ];
        let mut server = ServerState {
            extractor: None,
            predictors: vec![w0.clone()],
            weights: vec![1.0, 1.0],
            round: 0,
        };
        let cfg = TrainerConfig::new(Algorithm::FedAvg, 1, 5);
        fedavg_round(&mut server, &mut agents, &cfg).unwrap();

        // Oracle: independent scalar computation of both local steps.
        let eta = cfg.eta_w;
        let hand = |x: f64, y: usize| -> (Vec<f64>, Vec<f64>) {
            let z = [
                0.4 * x + 0.1,  // logit 0
                -0.2 * x - 0.1, // logit 1
            ];
            let m = z[0].max(z[1]);
            let denom = (z[0] - m).exp() + (z[1] - m).exp();
            let p = [(z[0] - m).exp() / denom, (z[1] - m).exp() / denom];
            let dy = [
                p[0] - if y == 0 { 1.0 } else { 0.0 },
                p[1] - if y == 1 { 1.0 } else { 0.0 },
            ];
            (
                vec![0.4 - eta * x * dy[0], -0.2 - eta * x * dy[1]],
                vec![0.1 - eta * dy[0], -0.1 - eta * dy[1]],
            )
        };
        let (wa, ba) = hand(x_a, y_a);
        let (wb, bb) = hand(x_b, y_b);
        let got = &server.predictors[0].layers[0];
        for j in 0..2 {
            assert_relative_eq!(
                got.weights[[0, j]],
                0.5 * (wa[j] + wb[j]),
                max_relative = 1e-12
            );
            assert_relative_eq!(got.bias[j], 0.5 * (ba[j] + bb[j]), max_relative = 1e-12);
        }
    }

    #[test]
    fn flgames_zero_eta_phi_freezes_extractor() {
        let ext_spec = MlpSpec::elu_stack(vec![3, 2]).unwrap();
        let pred_spec = MlpSpec::elu_stack(vec![2, 2]).unwrap();
        let extractor = init_params(&ext_spec, 1);
        let features = Array2::from_shape_fn((6, 3), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let mut agents = vec![
            AgentState::new(0, 1, features.clone(), labels.clone(), init_params(&pred_spec, 2), 3)
                .unwrap(),
            AgentState::new(1, 2, features, labels, init_params(&pred_spec, 4), 5).unwrap(),
        ];
        let mut server = ServerState {
            extractor: Some(extractor.clone()),
            predictors: agents.iter().map(|a| a.predictor.clone()).collect(),
            weights: vec![1.0, 1.0],
            round: 0,
        };
        let mut cfg = TrainerConfig::new(Algorithm::VFlGames, 1, 5);
        cfg.eta_phi = 0.0;
        flgames_round(&mut server, &mut agents, &cfg).unwrap();
        assert_eq!(server.extractor.as_ref().unwrap(), &extractor);
    }

    #[test]
    fn flgames_phase_b_uses_round_start_opponents() {
        // Replay agent 1's update with frozen snapshots and compare bit-exact.
        let pred_spec = MlpSpec::elu_stack(vec![2, 4, 2]).unwrap();
        let features_a = Array2::from_shape_fn((8, 2), |(i, j)| (i as f64) * 0.3 - j as f64);
        let features_b = Array2::from_shape_fn((8, 2), |(i, j)| (j as f64) - (i as f64) * 0.1);
        let labels: Vec<usize> = (0..8).map(|i| (i / 4) % 2).collect();
        let make_agents = || -> Vec<AgentState> {
            vec![
                AgentState::new(0, 1, features_a.clone(), labels.clone(), init_params(&pred_spec, 2), 3)
                    .unwrap(),
                AgentState::new(1, 2, features_b.clone(), labels.clone(), init_params(&pred_spec, 9), 7)
                    .unwrap(),
            ]
        };
        let mut agents = make_agents();
        let snapshot: Vec<MlpParams> = agents.iter().map(|a| a.predictor.clone()).collect();
        let mut server = ServerState {
            extractor: None,
            predictors: snapshot.clone(),
            weights: vec![1.0, 1.0],
            round: 0,
        };
        let mut cfg = TrainerConfig::new(Algorithm::FFlGames, 1, 5);
        cfg.local_steps = 3;
        flgames_round(&mut server, &mut agents, &cfg).unwrap();

        // Manual replay for agent 1 with the frozen opponent (agent 0 snapshot).
        let mut replay_agents = make_agents();
        let opp = &snapshot[0];
        let mut own = snapshot[1].clone();
        for _ in 0..cfg.local_steps {
            let (batch, labels) = replay_agents[1].next_minibatch(cfg.minibatch);
            let step = cfg.eta_w * batch.nrows() as f64;
            let (own_logits, cache) = forward(&own, batch.view()).unwrap();
            let opp_logits = forward_logits(opp, batch.view()).unwrap();
            let ens = own_logits * 0.5 + &(opp_logits * 0.5);
            let (_, dl) = cross_entropy(&ens, &labels).unwrap();
            let g = backward(&own, &cache, &(dl * 0.5)).unwrap();
            sgd_step(&mut own, &g, step).unwrap();
        }
        assert_eq!(server.predictors[1], own);
    }

    #[test]
    fn flgames_single_round_matches_scalar_oracle() {
        // 1-dim linear extractor and 1-dim linear two-logit predictors, one
        // sample per agent; both phases derived by hand.
        use crate::nn::Activation;
        let ext_spec = MlpSpec::new(vec![1, 1], vec![Activation::Identity]).unwrap();
        let pred_spec = MlpSpec::new(vec![1, 2], vec![Activation::Identity]).unwrap();

        let (phi_w, phi_b) = (0.8, 0.05);
        let preds = [[0.3, -0.4, 0.02, -0.07], [-0.5, 0.6, -0.01, 0.04]];
        let xs = [1.2, -0.9];
        let ys = [0usize, 1usize];

        let mut extractor = init_params(&ext_spec, 1);
        extractor.layers[0].weights = array![[phi_w]];
        extractor.layers[0].bias = ndarray::arr1(&[phi_b]);
        let mut predictors = Vec::new();
        for p in preds {
            let mut m = init_params(&pred_spec, 1);
            m.layers[0].weights = array![[p[0], p[1]]];
            m.layers[0].bias = ndarray::arr1(&[p[2], p[3]]);
            predictors.push(m);
        }
        let mut agents: Vec<AgentState> = (0..2)
            .map(|r| {
                AgentState::new(r, r as u32 + 1, array![[xs[r]]], vec![ys[r]], predictors[r].clone(), 50)
                    .unwrap()
            })
            .collect();
        let mut server = ServerState {
            extractor: Some(extractor),
            predictors,
            weights: vec![1.0, 1.0],
            round: 0,
        };
        let cfg = TrainerConfig::new(Algorithm::VFlGames, 1, 5);
        flgames_round(&mut server, &mut agents, &cfg).unwrap();

        // Scalar oracle.
        let softmax = |z0: f64, z1: f64| {
            let m = z0.max(z1);
            let d = (z0 - m).exp() + (z1 - m).exp();
            [(z0 - m).exp() / d, (z1 - m).exp() / d]
        };
        // Phase A: dphi_r for each agent over its single sample.
        let mut dphi_w = 0.0;
        let mut dphi_b = 0.0;
        for r in 0..2 {
            let z = phi_w * xs[r] + phi_b;
            let l0 = 0.5 * (preds[0][0] * z + preds[0][2]) + 0.5 * (preds[1][0] * z + preds[1][2]);
            let l1 = 0.5 * (preds[0][1] * z + preds[0][3]) + 0.5 * (preds[1][1] * z + preds[1][3]);
            let p = softmax(l0, l1);
            let d = [
                p[0] - if ys[r] == 0 { 1.0 } else { 0.0 },
                p[1] - if ys[r] == 1 { 1.0 } else { 0.0 },
            ];
            let dz = 0.5 * (preds[0][0] * d[0] + preds[0][1] * d[1])
                + 0.5 * (preds[1][0] * d[0] + preds[1][1] * d[1]);
            dphi_w += 0.5 * dz * xs[r];
            dphi_b += 0.5 * dz;
        }
        let phi_w_new = phi_w - cfg.eta_phi * dphi_w;
        let phi_b_new = phi_b - cfg.eta_phi * dphi_b;
        let got_ext = server.extractor.as_ref().unwrap();
        assert_relative_eq!(got_ext.layers[0].weights[[0, 0]], phi_w_new, max_relative = 1e-12);
        assert_relative_eq!(got_ext.layers[0].bias[0], phi_b_new, max_relative = 1e-12);

        // Phase B with the updated extractor, frozen opponents.
        for r in 0..2 {
            let z = phi_w_new * xs[r] + phi_b_new;
            let opp = 1 - r;
            let l0 = 0.5 * (preds[r][0] * z + preds[r][2]) + 0.5 * (preds[opp][0] * z + preds[opp][2]);
            let l1 = 0.5 * (preds[r][1] * z + preds[r][3]) + 0.5 * (preds[opp][1] * z + preds[opp][3]);
            let p = softmax(l0, l1);
            let d = [
                p[0] - if ys[r] == 0 { 1.0 } else { 0.0 },
                p[1] - if ys[r] == 1 { 1.0 } else { 0.0 },
            ];
            // Gradient of the ensemble loss w.r.t. own weights: 0.5 * d * z.
            let expect = [
                preds[r][0] - cfg.eta_w * 0.5 * d[0] * z,
                preds[r][1] - cfg.eta_w * 0.5 * d[1] * z,
                preds[r][2] - cfg.eta_w * 0.5 * d[0],
                preds[r][3] - cfg.eta_w * 0.5 * d[1],
            ];
            let got = &server.predictors[r].layers[0];
            assert_relative_eq!(got.weights[[0, 0]], expect[0], max_relative = 1e-11);
            assert_relative_eq!(got.weights[[0, 1]], expect[1], max_relative = 1e-11);
            assert_relative_eq!(got.bias[0], expect[2], max_relative = 1e-11);
            assert_relative_eq!(got.bias[1], expect[3], max_relative = 1e-11);
        }
    }

    #[test]
    fn partition_examples() {
        let mut rng = substream(1, domain::PARTITION, 0, 0);
        let parts = partition_indices(1500, 3, &mut rng).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![500; 3]);
        let mut all: Vec<usize> = parts.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1500).collect::<Vec<_>>());

        let parts = partition_indices(10, 1, &mut rng).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), 10);
        assert!(partition_indices(3, 4, &mut rng).is_err());
    }

    #[test]
    fn evaluate_oracle_and_random_baselines() {
        // A "predictor" that always matches the oracle: single linear layer
        // with huge weight on the correct logit via features = one-hot label.
        let spec = MlpSpec::new(vec![2, 2], vec![crate::nn::Activation::Identity]).unwrap();
        let mut perfect = init_params(&spec, 1);
        perfect.layers[0].weights = array![[100.0, 0.0], [0.0, 100.0]];
        perfect.layers[0].bias = ndarray::arr1(&[0.0, 0.0]);
        let server = ServerState {
            extractor: None,
            predictors: vec![perfect],
            weights: vec![1.0],
            round: 0,
        };
        let labels = vec![0usize, 1, 1, 0];
        let features =
            Array2::from_shape_fn((4, 2), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let gains: Vec<Vec<f64>> = vec![
            vec![3.0, 1.0],
            vec![0.5, 2.0],
            vec![1.0, 4.0],
            vec![2.0, 0.1],
        ];
        let split = EvalSplit {
            name: "test".into(),
            features,
            labels: labels.clone(),
            per_config_gains: gains.clone(),
            power_ratio: 1.0,
        };
        let m = evaluate(&server, &[split], EnsembleMode::Function).unwrap();
        assert_eq!(m[0].accuracy, 1.0);
        assert_relative_eq!(m[0].se_pred, m[0].se_best, max_relative = 1e-12);

        // SE_random equals direct enumeration over the config set.
        let mut expect = 0.0;
        for g in &gains {
            expect += 0.5 * ((1.0 + g[0]).log2() + (1.0 + g[1]).log2());
        }
        expect /= gains.len() as f64;
        assert_relative_eq!(m[0].se_random, expect, max_relative = 1e-12);
    }

    #[test]
    fn random_guess_accuracy_near_half() {
        let spec = MlpSpec::new(vec![3, 2], vec![crate::nn::Activation::Identity]).unwrap();
        let mut coin = init_params(&spec, 1);
        for l in &mut coin.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        // All-zero logits: argmax ties to class 0 always; accuracy equals the
        // class-0 prevalence. Use random labels so prevalence ~ 0.5.
        let mut rng = substream(77, 0, 0, 0);
        use rand::Rng;
        let n = 1000;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let features = Array2::zeros((n, 3));
        let gains = vec![vec![1.0, 1.0]; n];
        let split = EvalSplit {
            name: "test".into(),
            features,
            labels: labels.clone(),
            per_config_gains: gains,
            power_ratio: 1.0,
        };
        let server = ServerState {
            extractor: None,
            predictors: vec![coin],
            weights: vec![1.0],
            round: 0,
        };
        let m = evaluate(&server, &[split], EnsembleMode::Function).unwrap();
        // Binomial 99.99% interval around 0.5 for n = 1000.
        assert!((m[0].accuracy - 0.5).abs() < 0.07, "accuracy {}", m[0].accuracy);
    }

    #[test]
    fn convergence_detector_examples() {
        let constant: Vec<(usize, f64)> = (1..=100).map(|r| (r, 0.8)).collect();
        assert_eq!(convergence_round(&constant, 50, 0.01), Some(50));

        let oscillating: Vec<(usize, f64)> =
            (1..=100).map(|r| (r, if r % 2 == 0 { 0.8 } else { 0.75 })).collect();
        assert_eq!(convergence_round(&oscillating, 50, 0.01), None);

        let settles: Vec<(usize, f64)> = (1..=200)
            .map(|r| (r, if r < 100 { 0.5 + 0.001 * r as f64 } else { 0.62 }))
            .collect();
        let conv = convergence_round(&settles, 50, 0.01).unwrap();
        assert!(conv > 50 && conv <= 160, "converged at {conv}");
    }
}
