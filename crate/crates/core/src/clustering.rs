//! Inference similarity clustering.
//!
//! Given the output matrices `B_k` of participant models on the server dataset,
//! the server builds an adjacency matrix
//!
//! ```text
//! A[i][j] = ||B_i ⊙ B_j||_F / (||B_i||_F * ||B_j||_F)
//! ```
//!
//! and forms clusters either by hard thresholding (`sign(A - beta)`, one
//! possibly-overlapping cluster per participant) or by average-linkage
//! agglomerative clustering on the distance `max_offdiag(A) - A`.
//!
//! The formula is used as written. For identical one-hot matrices with `M`
//! rows it gives `1/sqrt(M)`, not 1, so useful thresholds live on that scale;
//! [`AdjacencyMatrix::max_off_diagonal`] reports the realized range.

use serde::{Deserialize, Serialize};

use crate::error::{FlisError, Result};
use crate::exec::Execution;
use crate::nn::Matrix;

/// Outputs of one client model on the server dataset (`M x C`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceMatrix {
    values: Matrix,
    client_id: usize,
}

impl InferenceMatrix {
    pub fn new(values: Matrix, client_id: usize) -> Self {
        InferenceMatrix { values, client_id }
    }

    pub fn with_client_id(mut self, client_id: usize) -> Self {
        self.client_id = client_id;
        self
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    values: Matrix,
    participant_ids: Vec<usize>,
}

impl AdjacencyMatrix {
    pub fn new(values: Matrix, participant_ids: Vec<usize>) -> Result<Self> {
        if values.rows() != values.cols() || values.rows() != participant_ids.len() {
            return Err(FlisError::invalid(
                "adjacency",
                format!(
                    "{}x{} matrix for {} participants",
                    values.rows(),
                    values.cols(),
                    participant_ids.len()
                ),
            ));
        }
        Ok(AdjacencyMatrix { values, participant_ids })
    }

    pub fn len(&self) -> usize {
        self.participant_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participant_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn participant_ids(&self) -> &[usize] {
        &self.participant_ids
    }

    /// Largest entry off the diagonal, 0 for a single participant.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    best = best.max(self.get(i, j));
                }
            }
        }
        best
    }
}

/// Thresholded adjacency with entries in `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedMatrix {
    n: usize,
    values: Vec<i8>,
    participant_ids: Vec<usize>,
}

impl SignedMatrix {
    pub fn new(n: usize, values: Vec<i8>, participant_ids: Vec<usize>) -> Result<Self> {
        if values.len() != n * n || participant_ids.len() != n {
            return Err(FlisError::invalid("signed matrix", "values must be n x n with n participant ids"));
        }
        Ok(SignedMatrix { n, values, participant_ids })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.values[i * self.n + j]
    }

    pub fn participant_ids(&self) -> &[usize] {
        &self.participant_ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// One cluster per participant; clusters may overlap or repeat.
    Joint,
    /// A partition of the participants.
    Disjoint,
}

/// Clusters of client ids. Member lists are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<usize>>,
    pub mode: ClusterMode,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Sorted distinct client ids appearing in any cluster.
    pub fn members(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.clusters.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Index of the first cluster containing `client`.
    pub fn cluster_of(&self, client: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.binary_search(&client).is_ok())
    }
}

/// Builds the inference similarity adjacency matrix of the given participants.
pub fn adjacency(mats: &[InferenceMatrix]) -> Result<AdjacencyMatrix> {
    adjacency_with(mats, Execution::default())
}

pub fn adjacency_with(mats: &[InferenceMatrix], exec: Execution) -> Result<AdjacencyMatrix> {
    if mats.len() < 2 {
        return Err(FlisError::invalid("inference matrices", "need at least two participants"));
    }
    let (rows, cols) = (mats[0].values.rows(), mats[0].values.cols());
    if let Some(bad) = mats.iter().find(|m| m.values.rows() != rows || m.values.cols() != cols) {
        return Err(FlisError::invalid(
            "inference matrices",
            format!(
                "client {} has a {}x{} matrix, expected {rows}x{cols}",
                bad.client_id,
                bad.values.rows(),
                bad.values.cols()
            ),
        ));
    }
    let norms: Vec<f64> = mats.iter().map(|m| m.values.frobenius()).collect();
    if let Some(k) = norms.iter().position(|&v| v == 0.0) {
        return Err(FlisError::DegenerateMatrix { client: mats[k].client_id });
    }

    let n = mats.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let sims = exec.map(&pairs, |&(i, j)| {
        let hadamard: f64 = mats[i]
            .values
            .as_slice()
            .iter()
            .zip(mats[j].values.as_slice())
            .map(|(a, b)| (a * b) * (a * b))
            .sum();
        hadamard.sqrt() / (norms[i] * norms[j])
    });
    let mut values = Matrix::zeros(n, n);
    for (&(i, j), &s) in pairs.iter().zip(&sims) {
        values.set(i, j, s);
        values.set(j, i, s);
    }
    AdjacencyMatrix::new(values, mats.iter().map(|m| m.client_id).collect())
}

/// `sign(A - beta)` entrywise, with `sign(0) = 0`.
pub fn hard_threshold(a: &AdjacencyMatrix, beta: f64) -> SignedMatrix {
    let n = a.len();
    let values = a
        .values
        .as_slice()
        .iter()
        .map(|&v| {
            if v > beta {
                1
            } else if v < beta {
                -1
            } else {
                0
            }
        })
        .collect();
    SignedMatrix { n, values, participant_ids: a.participant_ids.clone() }
}

/// One cluster per row: the participants with a positive entry, plus the row's
/// own participant. Duplicate clusters are kept.
pub fn joint_clusters(signed: &SignedMatrix) -> ClusterSet {
    let n = signed.n;
    let clusters = (0..n)
        .map(|i| {
            let mut c: Vec<usize> = (0..n)
                .filter(|&j| j == i || signed.get(i, j) > 0)
                .map(|j| signed.participant_ids[j])
                .collect();
            c.sort_unstable();
            c
        })
        .collect();
    ClusterSet { clusters, mode: ClusterMode::Joint }
}

/// Average-linkage agglomerative clustering on `d = max_offdiag(A) - A`.
///
/// Merges the closest pair of clusters until the smallest inter-cluster
/// distance exceeds `distance_threshold`. Equal distances are resolved in
/// favour of the pair with the lowest cluster indices, where a cluster's index
/// is the position of its first participant.
pub fn hierarchical_clusters(a: &AdjacencyMatrix, distance_threshold: f64) -> ClusterSet {
    let n = a.len();
    let a_max = a.max_off_diagonal();
    // dist[i][j] between active slots; slot i keeps the cluster whose smallest
    // member is participant i
    let mut dist: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| a_max - a.get(i, j)).collect()).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<bool> = vec![true; n];

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d > distance_threshold {
            break;
        }
        let (si, sj) = (members[i].len() as f64, members[j].len() as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let merged = (si * dist[i][k] + sj * dist[j][k]) / (si + sj);
                dist[i][k] = merged;
                dist[k][i] = merged;
            }
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        active[j] = false;
    }

    let clusters = (0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut c: Vec<usize> = members[i].iter().map(|&p| a.participant_ids[p]).collect();
            c.sort_unstable();
            c
        })
        .collect();
    ClusterSet { clusters, mode: ClusterMode::Disjoint }
}

/// Pair-counting clustering error against planted distribution ids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteringError {
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClusteringError {
    pub fn total(&self) -> usize {
        self.false_positives + self.false_negatives
    }
}

/// Counts, over unordered pairs of clustered participants, pairs that share a
/// cluster but come from different distributions (FP) and pairs from the same
/// distribution that share no cluster (FN). `truth` is indexed by client id.
pub fn clustering_error(found: &ClusterSet, truth: &[i64]) -> Result<ClusteringError> {
    let members = found.members();
    for &m in &members {
        match truth.get(m) {
            None => {
                return Err(FlisError::MetricUnavailable(format!("no ground truth for client {m}")));
            }
            Some(&t) if t < 0 => {
                return Err(FlisError::MetricUnavailable(format!(
                    "client {m} has no planted distribution id"
                )));
            }
            _ => {}
        }
    }
    let index = |c: usize| members.binary_search(&c).expect("member");
    let n = members.len();
    let mut together = vec![false; n * n];
    for cluster in &found.clusters {
        for (x, &a) in cluster.iter().enumerate() {
            for &b in &cluster[x + 1..] {
                let (i, j) = (index(a), index(b));
                together[i * n + j] = true;
                together[j * n + i] = true;
            }
        }
    }
    let mut err = ClusteringError::default();
    for i in 0..n {
        for j in (i + 1)..n {
            let same = truth[members[i]] == truth[members[j]];
            match (together[i * n + j], same) {
                (true, false) => err.false_positives += 1,
                (false, true) => err.false_negatives += 1,
                _ => {}
            }
        }
    }
    Ok(err)
}
