//! Collaborative training across sensing nodes.
//!
//! Each round every node runs local SGD on its own data (gradients restricted
//! to the bands it observes), then a barrier averages parameters:
//!
//! - decoupled: shallow block over all nodes, each band's deep block over the
//!   nodes observing that band, results written back to every node;
//! - FedAvg: every parameter over all nodes;
//! - standalone: one node holding the union of all data, no averaging.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::nn::{self, batch_bce_loss, classify_probs, cosine_lr, ArchConfig, LrSchedule, Mode, ModelParams};
use crate::rng::{substream, tag, SimRng};
use crate::simgen::{Dataset, Split};

mod mean;
pub use mean::exact_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Standalone,
    Decoupled,
    Fedavg,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Standalone, Scheme::Decoupled, Scheme::Fedavg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Standalone => "standalone",
            Scheme::Decoupled => "decoupled",
            Scheme::Fedavg => "fedavg",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme {s:?}")))
    }
}

/// `masks[j][n] = 1` iff node `j` observes band `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationTopology {
    masks: Vec<Vec<u8>>,
}

impl ObservationTopology {
    pub fn new(masks: Vec<Vec<u8>>) -> Result<Self> {
        let t = ObservationTopology { masks };
        t.validate()?;
        Ok(t)
    }

    pub fn full(n_nodes: usize, n_bands: usize) -> Result<Self> {
        Self::new(vec![vec![1; n_bands]; n_nodes])
    }

    /// Each node observes a random run of `width` adjacent bands; draws are
    /// repeated until every band is covered.
    pub fn random_windows<R: Rng + ?Sized>(n_nodes: usize, n_bands: usize, width: usize, rng: &mut R) -> Result<Self> {
        if n_nodes == 0 || n_bands == 0 || width == 0 || width > n_bands {
            return Err(Error::Topology(format!(
                "cannot place windows of {width} bands for {n_nodes} nodes over {n_bands} bands"
            )));
        }
        if n_nodes * width < n_bands {
            return Err(Error::Topology(format!(
                "{n_nodes} windows of {width} bands cannot cover {n_bands} bands"
            )));
        }
        const MAX_ATTEMPTS: usize = 100_000;
        for _ in 0..MAX_ATTEMPTS {
            let masks: Vec<Vec<u8>> = (0..n_nodes)
                .map(|_| {
                    let start = rng.random_range(0..=n_bands - width);
                    (0..n_bands).map(|n| u8::from((start..start + width).contains(&n))).collect()
                })
                .collect();
            if let Ok(t) = Self::new(masks) {
                return Ok(t);
            }
        }
        Err(Error::Topology(format!("no covering topology found in {MAX_ATTEMPTS} draws")))
    }

    pub fn validate(&self) -> Result<()> {
        let n_bands = self.masks.first().map_or(0, Vec::len);
        if self.masks.is_empty() || n_bands == 0 {
            return Err(Error::Topology("need at least one node and one band".into()));
        }
        for (j, m) in self.masks.iter().enumerate() {
            if m.len() != n_bands {
                return Err(Error::Topology(format!("node {j} mask has {} bands, expected {n_bands}", m.len())));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Topology(format!("node {j} mask is not binary")));
            }
            if m.iter().all(|&v| v == 0) {
                return Err(Error::Topology(format!("node {j} observes no band")));
            }
        }
        if let Some(n) = (0..n_bands).find(|&n| self.masks.iter().all(|m| m[n] == 0)) {
            return Err(Error::Topology(format!("band {n} is not observed by any node")));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.masks.len()
    }

    pub fn n_bands(&self) -> usize {
        self.masks[0].len()
    }

    pub fn mask(&self, node: usize) -> &[u8] {
        &self.masks[node]
    }

    pub fn masks(&self) -> &[Vec<u8>] {
        &self.masks
    }

    /// Nodes observing `band`, in index order.
    pub fn observers(&self, band: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&j| self.masks[j][band] != 0).collect()
    }
}

fn default_rounds() -> usize {
    30
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_eta0() -> f64 {
    0.05
}
fn default_eta_min() -> f64 {
    5e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_eta_min")]
    pub eta_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: default_rounds(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            eta0: default_eta0(),
            eta_min: default_eta_min(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        LrSchedule::new(self.eta0, self.eta_min, 1).map(|_| ())
    }

    pub fn iterations_per_round(&self, n_train: usize) -> u64 {
        (self.epochs * n_train.div_ceil(self.batch_size)) as u64
    }

    /// Schedule over the whole run: `t_max = rounds * iterations per round`.
    pub fn schedule(&self, n_train: usize) -> Result<LrSchedule> {
        let t_max = (self.rounds as u64 * self.iterations_per_round(n_train)).max(1);
        LrSchedule::new(self.eta0, self.eta_min, t_max)
    }
}

/// Normalized features and labels held by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub features: usize,
    pub n_bands: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<u8>,
    pub test_x: Vec<f64>,
    pub test_y: Vec<u8>,
}

impl NodeData {
    pub fn from_dataset(d: &Dataset) -> Self {
        NodeData {
            features: d.n_points * d.n_bands,
            n_bands: d.n_bands,
            train_x: d.features(Split::Train),
            train_y: d.labels(Split::Train),
            test_x: d.features(Split::Test),
            test_y: d.labels(Split::Test),
        }
    }

    pub fn n_train(&self) -> usize {
        self.train_y.len() / self.n_bands
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len() / self.n_bands
    }
}

/// One sensing node.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub params: ModelParams,
    pub mask: Vec<u8>,
    pub data: Arc<NodeData>,
    pub rng: SimRng,
}

impl AsRef<ModelParams> for NodeState {
    fn as_ref(&self) -> &ModelParams {
        &self.params
    }
}

impl AsMut<ModelParams> for NodeState {
    fn as_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }
}

/// Every node starts from the same parameter draw; shuffling streams are
/// per node.
pub fn init_nodes(
    arch: ArchConfig,
    topology: &ObservationTopology,
    data: Vec<Arc<NodeData>>,
    seed: u64,
) -> Result<Vec<NodeState>> {
    topology.validate()?;
    if data.len() != topology.n_nodes() {
        return Err(Error::Topology(format!(
            "{} datasets for {} nodes",
            data.len(),
            topology.n_nodes()
        )));
    }
    if topology.n_bands() != arch.n_bands {
        return Err(Error::Dimension(format!(
            "topology has {} bands, network {}",
            topology.n_bands(),
            arch.n_bands
        )));
    }
    let params = ModelParams::init_seeded(arch, seed)?;
    Ok(data
        .into_iter()
        .enumerate()
        .map(|(j, data)| NodeState {
            params: params.clone(),
            mask: topology.mask(j).to_vec(),
            data,
            rng: substream(seed, &[tag::NODE, j as u64]),
        })
        .collect())
}

/// Per-iteration training losses (mean BCE per observed band and sample).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalStats {
    pub losses: Vec<f64>,
}

impl LocalStats {
    pub fn mean(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

/// Runs `epochs` shuffled passes of minibatch SGD on the node's training
/// split. The learning rate is taken at the global iteration
/// `round_idx * iters_per_round + k`; gradients are averaged over each batch.
pub fn local_train(
    node: &mut NodeState,
    round_idx: usize,
    schedule: &LrSchedule,
    epochs: usize,
    batch_size: usize,
) -> Result<LocalStats> {
    let data = Arc::clone(&node.data);
    let n = data.n_train();
    if n == 0 {
        return Err(Error::InvalidParameter("node has no training data".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
    }
    let per_round = (epochs * n.div_ceil(batch_size)) as u64;
    let mut t = round_idx as u64 * per_round;
    let observed = node.mask.iter().filter(|&&m| m != 0).count().max(1);
    let (f, n_f) = (data.features, data.n_bands);
    let mut stats = LocalStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut x = Vec::with_capacity(batch_size * f);
    let mut y = Vec::with_capacity(batch_size * n_f);
    let mut cache = nn::ForwardCache::default();
    let mut scratch = nn::BackwardScratch::default();
    let mut grads = node.params.zero_gradients();
    for _ in 0..epochs {
        order.shuffle(&mut node.rng);
        for chunk in order.chunks(batch_size) {
            x.clear();
            y.clear();
            for &i in chunk {
                x.extend_from_slice(&data.train_x[i * f..(i + 1) * f]);
                y.extend_from_slice(&data.train_y[i * n_f..(i + 1) * n_f]);
            }
            let pred = nn::forward_into(&node.params, &x, Mode::Train, &mut cache)?;
            let loss = batch_bce_loss(&pred, &y, &node.mask)?;
            nn::backward_into(&node.params, &cache, &y, &node.mask, &mut grads, &mut scratch)?;
            let scale = 1.0 / chunk.len() as f64;
            grads.shallow.iter_mut().chain(grads.deep.iter_mut().flatten()).for_each(|g| *g *= scale);
            nn::update_running_stats(&mut node.params, &cache, &node.mask)?;
            let eta = cosine_lr(t.min(schedule.t_max), schedule)?;
            node.params.sgd_step(&grads, eta)?;
            stats.losses.push(loss.value * scale / observed as f64);
            t += 1;
        }
    }
    Ok(stats)
}

fn check_shapes<M: AsRef<ModelParams>>(nodes: &[M]) -> Result<()> {
    let first = nodes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no nodes to average".into()))?
        .as_ref();
    if nodes.iter().any(|m| !m.as_ref().compatible(first)) {
        return Err(Error::Dimension("nodes hold parameters of different shapes".into()));
    }
    Ok(())
}

fn gather<M: AsRef<ModelParams>>(nodes: &[M], sources: &[usize], pick: impl Fn(&ModelParams) -> &[f64]) -> Vec<f64> {
    let len = pick(nodes[0].as_ref()).len();
    let mut column = vec![0.0; sources.len()];
    (0..len)
        .map(|i| {
            for (slot, &j) in column.iter_mut().zip(sources) {
                *slot = pick(nodes[j].as_ref())[i];
            }
            exact_mean(&column)
        })
        .collect()
}

/// Elementwise mean of the shallow block (including batchnorm running
/// statistics) over all nodes, written back to every node.
pub fn average_shallow<M: AsRef<ModelParams> + AsMut<ModelParams>>(nodes: &mut [M]) -> Result<()> {
    check_shapes(nodes)?;
    let all: Vec<usize> = (0..nodes.len()).collect();
    let mean = gather(nodes, &all, |p| p.shallow());
    for node in nodes.iter_mut() {
        node.as_mut().shallow_mut().copy_from_slice(&mean);
    }
    Ok(())
}

/// Band `n`'s deep block averaged over the nodes observing `n`, then written
/// back to all nodes.
pub fn average_deep<M: AsRef<ModelParams> + AsMut<ModelParams>>(
    nodes: &mut [M],
    topology: &ObservationTopology,
) -> Result<()> {
    check_shapes(nodes)?;
    if topology.n_nodes() != nodes.len() || topology.n_bands() != nodes[0].as_ref().n_bands() {
        return Err(Error::Topology("topology does not match the node set".into()));
    }
    for band in 0..topology.n_bands() {
        let observers = topology.observers(band);
        let mean = gather(nodes, &observers, |p| p.deep(band));
        for node in nodes.iter_mut() {
            node.as_mut().deep_mut(band).copy_from_slice(&mean);
        }
    }
    Ok(())
}

/// Plain FedAvg: every parameter averaged over all nodes.
pub fn average_all<M: AsRef<ModelParams> + AsMut<ModelParams>>(nodes: &mut [M]) -> Result<()> {
    check_shapes(nodes)?;
    let all: Vec<usize> = (0..nodes.len()).collect();
    average_shallow(nodes)?;
    for band in 0..nodes[0].as_ref().n_bands() {
        let mean = gather(nodes, &all, |p| p.deep(band));
        for node in nodes.iter_mut() {
            node.as_mut().deep_mut(band).copy_from_slice(&mean);
        }
    }
    Ok(())
}

/// Bytes sent to the aggregator per round (f64 parameters).
pub fn bytes_per_round(scheme: Scheme, params: &ModelParams, topology: &ObservationTopology) -> u64 {
    let shallow = params.layout().shallow_len() as u64;
    let deep = params.layout().deep_len() as u64;
    let j = topology.n_nodes() as u64;
    let deep_msgs: u64 = match scheme {
        Scheme::Standalone => return 0,
        Scheme::Decoupled => (0..topology.n_bands()).map(|n| topology.observers(n).len() as u64).sum(),
        Scheme::Fedavg => topology.n_bands() as u64 * j,
    };
    8 * (shallow * j + deep_msgs * deep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub node: usize,
    pub scheme: Scheme,
    pub loss: f64,
    /// Accuracy on the node's test split over the bands it observes.
    pub accuracy: f64,
    pub bytes_exchanged: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<RoundRecord>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "node", "scheme", "loss", "accuracy", "bytes_exchanged"])?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.node.to_string(),
                r.scheme.to_string(),
                r.loss.to_string(),
                r.accuracy.to_string(),
                r.bytes_exchanged.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv stream>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::experiment::write_atomic(path, &buf)
    }
}

/// Whole-spectrum test performance of all nodes after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub confusion: Confusion,
    pub mean_loss: f64,
    pub bytes_exchanged: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scheme: Scheme,
    pub nodes: Vec<NodeState>,
    pub history: TrainingHistory,
    pub rounds: Vec<RoundSummary>,
}

const EVAL_CHUNK: usize = 256;

/// Test-split probabilities of `params` on `data`.
pub fn predict_test(params: &ModelParams, data: &NodeData) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(data.test_y.len());
    let mut cache = nn::ForwardCache::default();
    for chunk in data.test_x.chunks(EVAL_CHUNK * data.features) {
        let pred = nn::forward_into(params, chunk, Mode::Eval, &mut cache)?;
        probs.extend_from_slice(&pred.probs);
    }
    Ok(probs)
}

/// Trains `nodes` for `cfg.rounds` rounds under `scheme`'s averaging rule.
pub fn run_rounds(
    scheme: Scheme,
    mut nodes: Vec<NodeState>,
    topology: &ObservationTopology,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n_train = nodes.iter().map(|n| n.data.n_train()).max().unwrap_or(0);
    let schedule = cfg.schedule(n_train)?;
    let bytes = bytes_per_round(scheme, &nodes[0].params, topology);
    let mut history = TrainingHistory::default();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut losses = Vec::with_capacity(nodes.len());
        for node in nodes.iter_mut() {
            losses.push(local_train(node, round, &schedule, cfg.epochs, cfg.batch_size)?.mean());
        }
        match scheme {
            Scheme::Standalone => {}
            Scheme::Decoupled => {
                average_shallow(&mut nodes)?;
                average_deep(&mut nodes, topology)?;
            }
            Scheme::Fedavg => average_all(&mut nodes)?,
        }
        let mut confusion = Confusion::default();
        for (j, node) in nodes.iter().enumerate() {
            let decisions = classify_probs(&predict_test(&node.params, &node.data)?);
            confusion.add(&decisions, &node.data.test_y, None);
            let mut local = Confusion::default();
            local.add(&decisions, &node.data.test_y, Some(&node.mask));
            history.records.push(RoundRecord {
                round: round + 1,
                node: j,
                scheme,
                loss: losses[j],
                accuracy: local.accuracy().unwrap_or(0.0),
                bytes_exchanged: bytes,
            });
        }
        rounds.push(RoundSummary {
            round: round + 1,
            confusion,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            bytes_exchanged: bytes,
        });
    }
    Ok(RunOutput {
        scheme,
        nodes,
        history,
        rounds,
    })
}

fn node_data(datasets: &[Dataset]) -> Vec<Arc<NodeData>> {
    datasets.iter().map(|d| Arc::new(NodeData::from_dataset(d))).collect()
}

/// Decoupled collaborative training; `datasets[j]` belongs to node `j`.
pub fn run_decoupled(
    arch: ArchConfig,
    datasets: &[Dataset],
    topology: &ObservationTopology,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutput> {
    let nodes = init_nodes(arch, topology, node_data(datasets), seed)?;
    run_rounds(Scheme::Decoupled, nodes, topology, cfg)
}

/// FedAvg baseline; local gradients are still masked by observation.
pub fn run_fedavg(
    arch: ArchConfig,
    datasets: &[Dataset],
    topology: &ObservationTopology,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutput> {
    let nodes = init_nodes(arch, topology, node_data(datasets), seed)?;
    run_rounds(Scheme::Fedavg, nodes, topology, cfg)
}

/// One centralized model trained on the union of all nodes' data with every
/// band observed.
pub fn run_standalone(arch: ArchConfig, datasets: &[Dataset], cfg: &TrainConfig, seed: u64) -> Result<RunOutput> {
    let union = if datasets.len() == 1 {
        datasets[0].clone()
    } else {
        Dataset::merge(datasets)?
    };
    let topology = ObservationTopology::full(1, arch.n_bands)?;
    let nodes = init_nodes(arch, &topology, node_data(std::slice::from_ref(&union)), seed)?;
    run_rounds(Scheme::Standalone, nodes, &topology, cfg)
}

pub fn run_scheme(
    scheme: Scheme,
    arch: ArchConfig,
    datasets: &[Dataset],
    topology: &ObservationTopology,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutput> {
    match scheme {
        Scheme::Standalone => run_standalone(arch, datasets, cfg, seed),
        Scheme::Decoupled => run_decoupled(arch, datasets, topology, cfg, seed),
        Scheme::Fedavg => run_fedavg(arch, datasets, topology, cfg, seed),
    }
}

#[cfg(test)]
mod tests;
