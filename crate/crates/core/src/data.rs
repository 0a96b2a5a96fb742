//! Synthetic corpus generation, server holdout and Non-IID client partitions.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlisError, Result};
use crate::nn::{LabeledData, Matrix};
use crate::rng;

/// Every client needs one train and one test sample.
const MIN_CLIENT_SAMPLES: usize = 2;
const DIRICHLET_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Each client holds `ceil(fraction * classes)` labels.
    LabelSkew { fraction: f64 },
    /// Per-class proportions across clients drawn from `Dir(alpha)`.
    Dirichlet { alpha: f64 },
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(FlisError::invalid("num_clients", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(FlisError::invalid("test_fraction", "must lie in (0, 1)"));
        }
        match self.scheme {
            PartitionScheme::LabelSkew { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(FlisError::invalid("fraction", "label-skew fraction must lie in (0, 1]"));
                }
                if labels_per_client(fraction, num_classes) == 0 {
                    return Err(FlisError::invalid("fraction", "selects zero labels per client"));
                }
            }
            PartitionScheme::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(FlisError::invalid("alpha", "must be positive and finite"));
                }
            }
            PartitionScheme::Iid => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: LabeledData,
    pub test: LabeledData,
    /// Planted ground-truth group, -1 when the partition defines none.
    pub distribution_id: i64,
}

impl ClientDataset {
    /// `|D_k|`, the number of training samples.
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

/// Everything needed to materialize a federation's data: corpus source,
/// server holdout, client partition and late joiners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Replaces the synthetic generator when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub server_size: usize,
    pub partition: PartitionScheme,
    pub test_fraction: f64,
    pub unseen_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 8,
            dim: 16,
            per_class: 225,
            spread: 0.6,
            csv: None,
            server_size: 200,
            partition: PartitionScheme::LabelSkew { fraction: 0.2 },
            test_fraction: 0.2,
            unseen_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedData {
    pub server: LabeledData,
    pub clients: Vec<ClientDataset>,
    pub unseen: Vec<ClientDataset>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.csv.is_none() {
            if self.num_classes < 2 {
                return Err(FlisError::invalid("num_classes", "need at least 2 classes"));
            }
            if self.dim < 2 {
                return Err(FlisError::invalid("dim", "need at least 2 features"));
            }
            if self.per_class == 0 {
                return Err(FlisError::invalid("per_class", "must be at least 1"));
            }
            if !(self.spread >= 0.0 && self.spread.is_finite()) {
                return Err(FlisError::invalid("spread", "must be non-negative and finite"));
            }
        }
        if self.server_size == 0 {
            return Err(FlisError::invalid("server_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(FlisError::invalid("unseen_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn corpus(&self, seed: u64) -> Result<LabeledData> {
        match &self.csv {
            Some(path) => load_csv(path),
            None => generate_synthetic(self.num_classes, self.dim, self.per_class, self.spread, seed),
        }
    }

    pub fn build(&self, num_clients: usize, seed: u64) -> Result<FederatedData> {
        self.validate()?;
        let corpus = self.corpus(seed)?;
        let (server, rest) = server_holdout(&corpus, self.server_size, seed)?;
        let spec = PartitionSpec { scheme: self.partition, num_clients, test_fraction: self.test_fraction, seed };
        let (clients, unseen) = split_unseen(partition(&rest, &spec)?, self.unseen_fraction, seed)?;
        Ok(FederatedData { server, clients, unseen })
    }
}

/// `ceil(p * classes)`, tolerant to `p * classes` landing a hair above an integer.
pub fn labels_per_client(fraction: f64, num_classes: usize) -> usize {
    ((fraction * num_classes as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Gaussian blobs around seed-derived unit-norm class centers. Samples are
/// ordered class by class.
pub fn generate_synthetic(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledData> {
    if num_classes < 2 {
        return Err(FlisError::invalid("num_classes", "need at least 2 classes"));
    }
    if dim < 2 {
        return Err(FlisError::invalid("dim", "need at least 2 features"));
    }
    if per_class == 0 {
        return Err(FlisError::invalid("per_class", "must be at least 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FlisError::invalid("spread", "must be finite and non-negative"));
    }
    let mut crng = rng::stream(seed, rng::TAG_CENTERS, &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| crng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let mut srng = rng::stream(seed, rng::TAG_SAMPLES, &[]);
    let mut values = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                let z: f64 = srng.sample(StandardNormal);
                values.push(mu + spread * z);
            }
            labels.push(c);
        }
    }
    LabeledData::new(Matrix::new(labels.len(), dim, values)?, labels, num_classes)
}

/// Reads a corpus from CSV with header `f0,...,f{d-1},label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledData> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| FlisError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| FlisError::Csv(e.to_string()))?.clone();
    let d = headers.len().saturating_sub(1);
    if d == 0 || &headers[d] != "label" || (0..d).any(|i| headers[i] != format!("f{i}")) {
        return Err(FlisError::Csv(format!(
            "header must be f0,...,f{{d-1}},label; found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| FlisError::Csv(format!("line {line}: {e}")))?;
        for i in 0..d {
            let v: f64 = rec[i]
                .trim()
                .parse()
                .map_err(|_| FlisError::Csv(format!("line {line}: bad value {:?} in column f{i}", &rec[i])))?;
            values.push(v);
        }
        let y: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| FlisError::Csv(format!("line {line}: bad label {:?}", &rec[d])))?;
        labels.push(y);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.is_empty() {
        return Err(FlisError::Csv("no data rows".into()));
    }
    LabeledData::new(Matrix::new(labels.len(), d, values)?, labels, classes)
}

fn indices_by_class(data: &LabeledData) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Class-stratified sample of `m` rows for the server, and the remaining corpus.
///
/// Per-class counts differ by at most one unless a class runs out of samples,
/// in which case the shortfall is spread over the remaining classes.
pub fn server_holdout(corpus: &LabeledData, m: usize, seed: u64) -> Result<(LabeledData, LabeledData)> {
    if m > corpus.len() {
        return Err(FlisError::Size { requested: m, available: corpus.len() });
    }
    let mut by_class = indices_by_class(corpus);
    let mut rng = rng::stream(seed, rng::TAG_HOLDOUT, &[]);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let c = by_class.len();
    let mut quota = vec![0usize; c];
    let mut remaining = m;
    // round-robin keeps counts within one of each other
    while remaining > 0 {
        let mut progressed = false;
        for k in 0..c {
            if remaining > 0 && quota[k] < by_class[k].len() {
                quota[k] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut server = Vec::with_capacity(m);
    let mut rest = Vec::with_capacity(corpus.len() - m);
    for (k, idx) in by_class.iter().enumerate() {
        server.extend_from_slice(&idx[..quota[k]]);
        rest.extend_from_slice(&idx[quota[k]..]);
    }
    server.sort_unstable();
    rest.sort_unstable();
    Ok((corpus.subset(&server), corpus.subset(&rest)))
}

/// Dispatches on the partition scheme.
pub fn partition(corpus: &LabeledData, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    match spec.scheme {
        PartitionScheme::LabelSkew { .. } => partition_label_skew(corpus, spec),
        PartitionScheme::Dirichlet { .. } => partition_dirichlet(corpus, spec),
        PartitionScheme::Iid => partition_iid(corpus, spec),
    }
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

fn build_clients(corpus: &LabeledData, spec: &PartitionSpec, owned: Vec<Vec<usize>>, dist_ids: &[i64]) -> Result<Vec<ClientDataset>> {
    owned
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            let n = idx.len();
            if n < MIN_CLIENT_SAMPLES {
                return Err(FlisError::Partition(format!(
                    "client {k} received {n} samples; at least {MIN_CLIENT_SAMPLES} are needed for a train/test split"
                )));
            }
            idx.sort_unstable();
            idx.shuffle(&mut rng::stream(spec.seed, rng::TAG_SPLIT, &[k as u64]));
            let n_test = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let (test, train) = idx.split_at(n_test);
            Ok(ClientDataset {
                client_id: k,
                train: corpus.subset(train),
                test: corpus.subset(test),
                distribution_id: dist_ids[k],
            })
        })
        .collect()
}

/// Label skew: the seed-shuffled label list is cut into consecutive windows of
/// `ceil(p * classes)` labels (wrapping around), and client `k` takes window
/// `k mod windows`. Each class is split evenly among its owners.
pub fn partition_label_skew(corpus: &LabeledData, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let PartitionScheme::LabelSkew { fraction } = spec.scheme else {
        return Err(FlisError::invalid("scheme", "expected label_skew"));
    };
    let classes = corpus.num_classes();
    spec.validate(classes)?;
    let k = labels_per_client(fraction, classes).min(classes);
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut rng::stream(spec.seed, rng::TAG_PARTITION, &[0]));
    let windows = classes.div_ceil(k);
    let subsets: Vec<Vec<usize>> = (0..windows)
        .map(|s| {
            let mut w: Vec<usize> = (0..k).map(|i| perm[(s * k + i) % classes]).collect();
            w.sort_unstable();
            w
        })
        .collect();

    let n = spec.num_clients;
    let assignment: Vec<usize> = (0..n).map(|c| c % windows).collect();
    let by_class = indices_by_class(corpus);
    let mut owned = vec![Vec::new(); n];
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let owners: Vec<usize> = (0..n).filter(|&c| subsets[assignment[c]].contains(&class)).collect();
        if owners.is_empty() {
            return Err(FlisError::Partition(format!(
                "class {class} is owned by no client ({n} clients cover {} of {windows} label subsets)",
                n.min(windows)
            )));
        }
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng::stream(spec.seed, rng::TAG_PARTITION, &[1, class as u64]));
        for (owner, chunk) in owners.iter().zip(even_chunks(&shuffled, owners.len())) {
            owned[*owner].extend_from_slice(chunk);
        }
    }
    let ids: Vec<i64> = assignment.iter().map(|&a| a as i64).collect();
    build_clients(corpus, spec, owned, &ids)
}

/// Largest-remainder rounding of `total * props` to integers summing to `total`.
fn largest_remainder(total: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // stable sort: equal remainders go to the lower index first
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet label distribution skew. The whole draw is repeated, up to a
/// fixed budget, until every client holds enough samples for a train/test split.
pub fn partition_dirichlet(corpus: &LabeledData, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let PartitionScheme::Dirichlet { alpha } = spec.scheme else {
        return Err(FlisError::invalid("scheme", "expected dirichlet"));
    };
    spec.validate(corpus.num_classes())?;
    let n = spec.num_clients;
    if corpus.len() < n * MIN_CLIENT_SAMPLES {
        return Err(FlisError::Partition(format!("{} samples cannot cover {n} clients", corpus.len())));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FlisError::invalid("alpha", e.to_string()))?;
    let by_class = indices_by_class(corpus);
    let mut rng = rng::stream(spec.seed, rng::TAG_PARTITION, &[2]);
    let shuffled: Vec<Vec<usize>> = by_class
        .iter()
        .enumerate()
        .map(|(class, idx)| {
            let mut s = idx.clone();
            s.shuffle(&mut rng::stream(spec.seed, rng::TAG_PARTITION, &[3, class as u64]));
            s
        })
        .collect();

    for _ in 0..DIRICHLET_RETRIES {
        let mut owned = vec![Vec::new(); n];
        for idx in &shuffled {
            let props = loop {
                let g: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = g.iter().sum();
                if s > 0.0 && s.is_finite() {
                    break g.into_iter().map(|v| v / s).collect::<Vec<_>>();
                }
            };
            let counts = largest_remainder(idx.len(), &props);
            let mut start = 0;
            for (client, &cnt) in counts.iter().enumerate() {
                owned[client].extend_from_slice(&idx[start..start + cnt]);
                start += cnt;
            }
        }
        if owned.iter().all(|o| o.len() >= MIN_CLIENT_SAMPLES) {
            return build_clients(corpus, spec, owned, &vec![-1; n]);
        }
    }
    Err(FlisError::Partition(format!(
        "no Dir({alpha}) draw gave every client {MIN_CLIENT_SAMPLES} samples within {DIRICHLET_RETRIES} attempts"
    )))
}

/// Uniform random split; all clients share distribution id 0.
pub fn partition_iid(corpus: &LabeledData, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate(corpus.num_classes())?;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::stream(spec.seed, rng::TAG_PARTITION, &[4]));
    let owned = even_chunks(&idx, spec.num_clients).into_iter().map(<[usize]>::to_vec).collect();
    build_clients(corpus, spec, owned, &vec![0; spec.num_clients])
}

/// Withholds `round(fraction * N)` randomly chosen clients as late joiners.
/// Returns `(participants, unseen)`, both in client-id order.
pub fn split_unseen(clients: Vec<ClientDataset>, fraction: f64, seed: u64) -> Result<(Vec<ClientDataset>, Vec<ClientDataset>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(FlisError::invalid("unseen_fraction", "must lie in [0, 1)"));
    }
    let n = clients.len();
    let k = (fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, rng::TAG_UNSEEN, &[]));
    let mut unseen_mask = vec![false; n];
    for &i in &ids[..k] {
        unseen_mask[i] = true;
    }
    Ok(clients.into_iter().enumerate().partition::<Vec<_>, _>(|(i, _)| !unseen_mask[*i]))
        .map(|(a, b)| (a.into_iter().map(|(_, c)| c).collect(), b.into_iter().map(|(_, c)| c).collect()))
}
