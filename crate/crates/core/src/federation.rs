//! Round orchestration for the clustered runners and the FedAvg/SOLO baselines.
//!
//! Clients are addressed by their position in the `clients` slice handed to a
//! runner; every id in a [`RoundRecord`] or [`ClusterSet`] is such a position.
//!
//! Random streams are derived from `(seed, round, client)`, so a round's client
//! updates may run concurrently and still reproduce sequential results exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{self, AdjacencyMatrix, ClusterMode, ClusterSet, ClusteringError};
use crate::data::ClientDataset;
use crate::error::{FlisError, Result};
use crate::exec::Execution;
use crate::nn::{self, InferenceMode, LabeledData, ModelParams, TrainConfig};
use crate::rng;

pub const BYTES_PER_PARAM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Dynamic, overlapping clusters rebuilt every round.
    #[serde(rename = "dc")]
    Dc,
    /// Fixed disjoint clusters from hierarchical clustering.
    #[serde(rename = "hc")]
    Hc,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "solo")]
    Solo,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dc => "dc",
            Mode::Hc => "hc",
            Mode::FedAvg => "fedavg",
            Mode::Solo => "solo",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub sample_rate: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub mode: Mode,
    pub inference_mode: InferenceMode,
    pub hc_distance_threshold: f64,
    pub hidden: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 20,
            sample_rate: 1.0,
            rounds: 30,
            local_epochs: 5,
            lr: 0.05,
            batch_size: 32,
            beta: 0.05,
            mode: Mode::Dc,
            inference_mode: InferenceMode::OneHot,
            hc_distance_threshold: 0.02,
            hidden: 32,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(FlisError::invalid("num_clients", "must be at least 1"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(FlisError::invalid("sample_rate", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(FlisError::invalid("rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(FlisError::invalid("local_epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlisError::invalid("lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(FlisError::invalid("batch_size", "must be at least 1"));
        }
        if !self.beta.is_finite() {
            return Err(FlisError::invalid("beta", "must be finite"));
        }
        if !(self.hc_distance_threshold > 0.0 && self.hc_distance_threshold.is_finite()) {
            return Err(FlisError::invalid("hc_distance_threshold", "must be positive and finite"));
        }
        if self.hidden == 0 {
            return Err(FlisError::invalid("hidden", "must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.local_epochs, lr: self.lr, batch_size: self.batch_size }
    }

    /// Participants per round, `max(ceil(R * N), 1)`.
    pub fn participants(&self) -> usize {
        participants(self.num_clients, self.sample_rate)
    }
}

fn participants(n: usize, rate: f64) -> usize {
    (((rate * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Cluster models held by the server after a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModels {
    pub round: usize,
    pub models: Vec<(Vec<usize>, ModelParams)>,
}

impl ClusterModels {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model(&self, j: usize) -> &ModelParams {
        &self.models[j].1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub sampled: Vec<usize>,
    /// Cluster each sampled client started from, `None` when it started from
    /// the initial model.
    pub selected: Vec<Option<usize>>,
    pub clusters: ClusterSet,
    /// Top-1 accuracy of every client on its local test split, using the model
    /// it would pick (or is assigned) after this round.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering_error: Option<ClusteringError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<AdjacencyMatrix>,
    pub models_down: usize,
    pub models_up: usize,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationRun {
    pub mode: Mode,
    pub initial: ModelParams,
    pub records: Vec<RoundRecord>,
    /// Server-side models after each round.
    pub history: Vec<ClusterModels>,
}

impl FederationRun {
    pub fn final_models(&self) -> &ClusterModels {
        self.history.last().expect("a run has at least one round")
    }

    pub fn final_accuracies(&self) -> &[f64] {
        &self.records.last().expect("a run has at least one round").accuracies
    }

    pub fn param_count(&self) -> usize {
        self.initial.param_count()
    }
}

/// Uniform sample without replacement of `max(ceil(R * N), 1)` clients, sorted.
pub fn sample_clients(num_clients: usize, sample_rate: f64, round: usize, seed: u64) -> Vec<usize> {
    let n = participants(num_clients, sample_rate);
    let mut rng = rng::stream(seed, rng::TAG_SAMPLE, &[round as u64]);
    let mut picked = rand::seq::index::sample(&mut rng, num_clients, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Cluster whose model has the lowest loss on the client's test split; ties go
/// to the lowest index.
pub fn select_cluster(client: &ClientDataset, models: &ClusterModels) -> Result<usize> {
    if models.is_empty() {
        return Err(FlisError::invalid("cluster models", "no cluster to select from"));
    }
    let mut best = (0, f64::INFINITY);
    for (j, (_, m)) in models.models.iter().enumerate() {
        let l = nn::loss(m, &client.test)?;
        if l < best.1 {
            best = (j, l);
        }
    }
    Ok(best.0)
}

/// `|D_k|`-weighted mean of the members' parameters.
///
/// Computed as `w_first + sum_k a_k (w_k - w_first)` with `a_k = |D_k| / sum |D|`,
/// which equals the weighted mean and returns the members' common value exactly
/// when they all agree.
pub fn aggregate(cluster: &[usize], updated: &BTreeMap<usize, (ModelParams, usize)>) -> Result<ModelParams> {
    let first = *cluster
        .first()
        .ok_or_else(|| FlisError::invalid("cluster", "cannot aggregate an empty cluster"))?;
    let members = cluster
        .iter()
        .map(|k| updated.get(k).map(|(m, s)| (m, *s)).ok_or(FlisError::MissingMember { client: *k }))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = members.iter().map(|(_, s)| s).sum();
    if total == 0 {
        return Err(FlisError::invalid("cluster", "members hold no training samples"));
    }
    let anchor = updated[&first].0.weights();
    let mut out = anchor.to_vec();
    for (model, size) in &members[1..] {
        let a = *size as f64 / total as f64;
        for ((o, &w), &w0) in out.iter_mut().zip(model.weights()).zip(anchor) {
            *o += a * (w - w0);
        }
    }
    updated[&first].0.with_weights(out)
}

/// The initial server model for clients of the given data shape.
pub fn initial_model(cfg: &FederationConfig, dim: usize, num_classes: usize) -> Result<ModelParams> {
    ModelParams::xavier(ModelParams::mlp_shape(&[dim, cfg.hidden, num_classes]), rng::derive(cfg.seed, rng::TAG_INIT, &[]))
}

fn check_clients(cfg: &FederationConfig, clients: &[ClientDataset]) -> Result<ModelParams> {
    cfg.validate()?;
    if clients.len() != cfg.num_clients {
        return Err(FlisError::invalid(
            "num_clients",
            format!("config says {} but {} client datasets were given", cfg.num_clients, clients.len()),
        ));
    }
    let first = &clients[0].train;
    initial_model(cfg, first.dim(), first.num_classes())
}

fn truth(clients: &[ClientDataset]) -> Option<Vec<i64>> {
    let t: Vec<i64> = clients.iter().map(|c| c.distribution_id).collect();
    t.iter().all(|&d| d >= 0).then_some(t)
}

fn error_against(clusters: &ClusterSet, truth: &Option<Vec<i64>>) -> Option<ClusteringError> {
    truth.as_ref().and_then(|t| clustering::clustering_error(clusters, t).ok())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains every `(client, start model)` job for one round.
fn train_round(
    cfg: &FederationConfig,
    clients: &[ClientDataset],
    jobs: &[(usize, &ModelParams)],
    tag: u64,
    round: usize,
) -> Result<BTreeMap<usize, (ModelParams, usize)>> {
    let tc = cfg.train_config();
    let trained = cfg.execution.try_map(jobs, |&(k, start)| {
        let seed = rng::derive(cfg.seed, tag, &[round as u64, k as u64]);
        nn::client_update(start, &clients[k].train, &tc, seed).map(|m| (k, (m, clients[k].size())))
    })?;
    Ok(trained.into_iter().collect())
}

/// Adjacency over the updated models of `ids`; `None` for a single participant.
fn similarity(
    cfg: &FederationConfig,
    server: &LabeledData,
    ids: &[usize],
    updated: &BTreeMap<usize, (ModelParams, usize)>,
) -> Result<Option<AdjacencyMatrix>> {
    if ids.len() < 2 {
        return Ok(None);
    }
    let mats = cfg.execution.try_map(ids, |&k| {
        nn::inference_matrix(&updated[&k].0, server, cfg.inference_mode).map(|b| b.with_client_id(k))
    })?;
    clustering::adjacency_with(&mats, cfg.execution).map(Some)
}

/// Accuracy of every client under the cluster model it would pick.
fn evaluate_selection(cfg: &FederationConfig, clients: &[ClientDataset], models: &ClusterModels) -> Result<Vec<f64>> {
    cfg.execution.try_map(clients, |c| {
        let j = select_cluster(c, models)?;
        nn::accuracy(models.model(j), &c.test)
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    round: usize,
    mode: Mode,
    sampled: Vec<usize>,
    selected: Vec<Option<usize>>,
    clusters: ClusterSet,
    accuracies: Vec<f64>,
    truth: &Option<Vec<i64>>,
    adjacency: Option<AdjacencyMatrix>,
    models_down: usize,
    models_up: usize,
    params: usize,
) -> RoundRecord {
    RoundRecord {
        round,
        mode,
        clustering_error: error_against(&clusters, truth),
        sampled,
        selected,
        clusters,
        mean_accuracy: mean(&accuracies),
        accuracies,
        adjacency_max: adjacency.as_ref().map(AdjacencyMatrix::max_off_diagonal),
        adjacency,
        models_down,
        models_up,
        bytes_down: models_down * params * BYTES_PER_PARAM,
        bytes_up: models_up * params * BYTES_PER_PARAM,
    }
}

/// Dynamic clustering: per-round inference similarity clustering with
/// overlapping clusters, one per participant.
pub fn run_flis_dc(cfg: &FederationConfig, clients: &[ClientDataset], server: &LabeledData) -> Result<FederationRun> {
    let theta0 = check_clients(cfg, clients)?;
    let truth = truth(clients);
    let params = theta0.param_count();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut history: Vec<ClusterModels> = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let step = || -> Result<(RoundRecord, ClusterModels)> {
            let sampled = sample_clients(cfg.num_clients, cfg.sample_rate, t, cfg.seed);
            let (selected, per_client_down): (Vec<Option<usize>>, usize) = match history.last() {
                None => (vec![None; sampled.len()], 1),
                Some(prev) => {
                    let picks = cfg.execution.try_map(&sampled, |&k| select_cluster(&clients[k], prev))?;
                    (picks.into_iter().map(Some).collect(), prev.len())
                }
            };
            let jobs: Vec<(usize, &ModelParams)> = sampled
                .iter()
                .zip(&selected)
                .map(|(&k, sel)| (k, sel.map_or(&theta0, |j| history.last().unwrap().model(j))))
                .collect();
            let updated = train_round(cfg, clients, &jobs, rng::TAG_TRAIN, t)?;

            let adjacency = similarity(cfg, server, &sampled, &updated)?;
            let clusters = match &adjacency {
                Some(a) => clustering::joint_clusters(&clustering::hard_threshold(a, cfg.beta)),
                None => ClusterSet { clusters: vec![sampled.clone()], mode: ClusterMode::Joint },
            };
            let models = ClusterModels {
                round: t,
                models: clusters
                    .clusters
                    .iter()
                    .map(|c| aggregate(c, &updated).map(|m| (c.clone(), m)))
                    .collect::<Result<_>>()?,
            };
            let accuracies = evaluate_selection(cfg, clients, &models)?;
            let n = sampled.len();
            let rec = record(
                t,
                Mode::Dc,
                sampled,
                selected,
                clusters,
                accuracies,
                &truth,
                adjacency,
                n * per_client_down,
                n,
                params,
            );
            Ok((rec, models))
        };
        let (rec, models) = step().map_err(|e| e.in_round(t))?;
        records.push(rec);
        history.push(models);
    }
    Ok(FederationRun { mode: Mode::Dc, initial: theta0, records, history })
}

/// Hierarchical clustering: a warm-up round over all clients fixes a disjoint
/// partition, after which each sampled client trains only its own cluster model.
///
/// Record 0 is the warm-up round; record `t >= 1` is training round `t - 1`,
/// whose sampling and seeds match round `t - 1` of [`run_fedavg`].
pub fn run_flis_hc(cfg: &FederationConfig, clients: &[ClientDataset], server: &LabeledData) -> Result<FederationRun> {
    let theta0 = check_clients(cfg, clients)?;
    let truth = truth(clients);
    let params = theta0.param_count();
    let n_all = cfg.num_clients;
    let everyone: Vec<usize> = (0..n_all).collect();

    let warm = || -> Result<(ClusterSet, Option<AdjacencyMatrix>)> {
        let jobs: Vec<(usize, &ModelParams)> = everyone.iter().map(|&k| (k, &theta0)).collect();
        let updated = train_round(cfg, clients, &jobs, rng::TAG_WARMUP, 0)?;
        let adjacency = similarity(cfg, server, &everyone, &updated)?;
        let clusters = match &adjacency {
            Some(a) => clustering::hierarchical_clusters(a, cfg.hc_distance_threshold),
            None => ClusterSet { clusters: vec![everyone.clone()], mode: ClusterMode::Disjoint },
        };
        Ok((clusters, adjacency))
    };
    let (clusters, adjacency) = warm().map_err(|e| e.in_round(0))?;
    let membership: Vec<usize> =
        everyone.iter().map(|&k| clusters.cluster_of(k).expect("partition covers all clients")).collect();

    let mut models = ClusterModels {
        round: 0,
        models: clusters.clusters.iter().map(|c| (c.clone(), theta0.clone())).collect(),
    };
    let assigned_accuracy = |models: &ClusterModels| -> Result<Vec<f64>> {
        cfg.execution.try_map(&everyone, |&k| nn::accuracy(models.model(membership[k]), &clients[k].test))
    };
    let mut records = Vec::with_capacity(cfg.rounds);
    let acc = assigned_accuracy(&models).map_err(|e| e.in_round(0))?;
    records.push(record(
        0,
        Mode::Hc,
        everyone.clone(),
        vec![None; n_all],
        clusters.clone(),
        acc,
        &truth,
        adjacency,
        n_all,
        n_all,
        params,
    ));
    let mut history = vec![models.clone()];

    for t in 1..cfg.rounds {
        let s = t - 1;
        let step = || -> Result<(RoundRecord, ClusterModels)> {
            let sampled = sample_clients(n_all, cfg.sample_rate, s, cfg.seed);
            let jobs: Vec<(usize, &ModelParams)> =
                sampled.iter().map(|&k| (k, models.model(membership[k]))).collect();
            let updated = train_round(cfg, clients, &jobs, rng::TAG_TRAIN, s)?;
            let mut next = models.clone();
            next.round = t;
            for (j, (members, model)) in next.models.iter_mut().enumerate() {
                let active: Vec<usize> = members.iter().copied().filter(|k| updated.contains_key(k)).collect();
                if !active.is_empty() {
                    *model = aggregate(&active, &updated)?;
                }
                debug_assert!(members.iter().all(|&k| membership[k] == j));
            }
            let acc = assigned_accuracy(&next)?;
            let selected = sampled.iter().map(|&k| Some(membership[k])).collect();
            let n = sampled.len();
            let rec = record(t, Mode::Hc, sampled, selected, clusters.clone(), acc, &truth, None, n, n, params);
            Ok((rec, next))
        };
        let (rec, next) = step().map_err(|e| e.in_round(t))?;
        records.push(rec);
        history.push(next.clone());
        models = next;
    }
    Ok(FederationRun { mode: Mode::Hc, initial: theta0, records, history })
}

/// One global model averaged over each round's sampled clients.
pub fn run_fedavg(cfg: &FederationConfig, clients: &[ClientDataset]) -> Result<FederationRun> {
    let theta0 = check_clients(cfg, clients)?;
    let truth = truth(clients);
    let params = theta0.param_count();
    let mut global = theta0.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut history = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let step = || -> Result<(RoundRecord, ModelParams)> {
            let sampled = sample_clients(cfg.num_clients, cfg.sample_rate, t, cfg.seed);
            let jobs: Vec<(usize, &ModelParams)> = sampled.iter().map(|&k| (k, &global)).collect();
            let updated = train_round(cfg, clients, &jobs, rng::TAG_TRAIN, t)?;
            let next = aggregate(&sampled, &updated)?;
            let acc = cfg.execution.try_map(clients, |c| nn::accuracy(&next, &c.test))?;
            let clusters = ClusterSet { clusters: vec![sampled.clone()], mode: ClusterMode::Disjoint };
            let selected = vec![(t > 0).then_some(0); sampled.len()];
            let n = sampled.len();
            Ok((record(t, Mode::FedAvg, sampled, selected, clusters, acc, &truth, None, n, n, params), next))
        };
        let (rec, next) = step().map_err(|e| e.in_round(t))?;
        history.push(ClusterModels { round: t, models: vec![(rec.sampled.clone(), next.clone())] });
        records.push(rec);
        global = next;
    }
    Ok(FederationRun { mode: Mode::FedAvg, initial: theta0, records, history })
}

/// Every client trains alone from the initial model; `local_epochs` per round,
/// `rounds * local_epochs` in total, no communication after the initial broadcast.
pub fn run_solo(cfg: &FederationConfig, clients: &[ClientDataset]) -> Result<FederationRun> {
    let theta0 = check_clients(cfg, clients)?;
    let truth = truth(clients);
    let params = theta0.param_count();
    let n = cfg.num_clients;
    let everyone: Vec<usize> = (0..n).collect();
    let mut own: Vec<ModelParams> = vec![theta0.clone(); n];
    let singletons = ClusterSet { clusters: everyone.iter().map(|&k| vec![k]).collect(), mode: ClusterMode::Disjoint };
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut history = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let step = || -> Result<(RoundRecord, Vec<ModelParams>)> {
            let jobs: Vec<(usize, &ModelParams)> = everyone.iter().map(|&k| (k, &own[k])).collect();
            let mut updated = train_round(cfg, clients, &jobs, rng::TAG_TRAIN, t)?;
            let next: Vec<ModelParams> = everyone.iter().map(|k| updated.remove(k).unwrap().0).collect();
            let acc = cfg.execution.try_map(&everyone, |&k| nn::accuracy(&next[k], &clients[k].test))?;
            let down = if t == 0 { n } else { 0 };
            let rec = record(t, Mode::Solo, everyone.clone(), vec![None; n], singletons.clone(), acc, &truth, None, down, 0, params);
            Ok((rec, next))
        };
        let (rec, next) = step().map_err(|e| e.in_round(t))?;
        history.push(ClusterModels { round: t, models: everyone.iter().map(|&k| (vec![k], next[k].clone())).collect() });
        records.push(rec);
        own = next;
    }
    Ok(FederationRun { mode: Mode::Solo, initial: theta0, records, history })
}

/// Runs the mode named in the config.
pub fn run(cfg: &FederationConfig, clients: &[ClientDataset], server: &LabeledData) -> Result<FederationRun> {
    match cfg.mode {
        Mode::Dc => run_flis_dc(cfg, clients, server),
        Mode::Hc => run_flis_hc(cfg, clients, server),
        Mode::FedAvg => run_fedavg(cfg, clients),
        Mode::Solo => run_solo(cfg, clients),
    }
}

/// Clients that joined after federation pick their best cluster model and
/// fine-tune it locally; returns each client's test accuracy. With
/// `train.epochs == 0` the selected model is evaluated as-is.
pub fn personalize_unseen(
    unseen: &[ClientDataset],
    models: &ClusterModels,
    train: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    exec.try_map(unseen, |c| {
        let j = select_cluster(c, models)?;
        let start = models.model(j);
        if train.epochs == 0 {
            return nn::accuracy(start, &c.test);
        }
        let s = rng::derive(seed, rng::TAG_PERSONALIZE, &[c.client_id as u64]);
        let tuned = nn::client_update(start, &c.train, train, s)?;
        nn::accuracy(&tuned, &c.test)
    })
}
