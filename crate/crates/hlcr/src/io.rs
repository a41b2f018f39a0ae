//! File formats: CSV datasets, JSON manifests, ground truth, model
//! checkpoints, trace CSVs, and the agent-update wire envelope.
//!
//! Cluster labels are 1-based in every file and 0-based in memory.
//! Checkpoints persist D and c only; H is recomputed on load, so a
//! checkpoint can never carry an inconsistent cached inverse.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federated::{AgentUpdate, ClusterDelta, GlobalModel, RoundTrace};
use crate::inference::SweepTrace;
use crate::linalg::SpdMatrix;
use crate::model::{
    Agent, ClusterStats, Entity, Event, GeneratorConfig, GroundTruth, HierDataset,
    Hyperparams, LabelAssignment, ModelError,
};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Dataset CSV

/// Writes `agent_id,entity_id,f_1,…,f_F,y` rows, events grouped by
/// entity in dataset order.
pub fn write_dataset_csv(path: &Path, data: &HierDataset) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["agent_id".to_string(), "entity_id".to_string()];
    header.extend((1..=data.feature_dim).map(|i| format!("f_{i}")));
    header.push("y".to_string());
    w.write_record(&header)?;
    for agent in &data.agents {
        for (j, entity) in agent.entities.iter().enumerate() {
            for ev in &entity.events {
                let mut rec = vec![agent.id.clone(), j.to_string()];
                rec.extend(ev.x.iter().map(|v| v.to_string()));
                rec.push(ev.y.to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV. Rows sharing (agent_id, entity_id) form one
/// entity; agents and entities keep first-appearance order. Ragged rows
/// and non-finite values are rejected with their row number.
pub fn read_dataset_csv(path: &Path) -> Result<HierDataset, IoError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 4
        || header.get(0) != Some("agent_id")
        || header.get(1) != Some("entity_id")
        || header.get(header.len() - 1) != Some("y")
    {
        return Err(IoError::Format {
            row: 1,
            message: "expected header agent_id,entity_id,f_1,...,y".into(),
        });
    }
    let feature_dim = header.len() - 3;
    for (i, name) in header.iter().skip(2).take(feature_dim).enumerate() {
        if name != format!("f_{}", i + 1) {
            return Err(IoError::Format {
                row: 1,
                message: format!("expected feature column f_{}, found {name:?}", i + 1),
            });
        }
    }

    let mut agents: Vec<Agent> = Vec::new();
    let mut agent_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut entity_index: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for (idx, record) in r.records().enumerate() {
        let row = idx + 2; // 1-based, after the header
        let record = record?;
        if record.len() != header.len() {
            return Err(IoError::Format {
                row,
                message: format!(
                    "expected {} fields, found {}",
                    header.len(),
                    record.len()
                ),
            });
        }
        let agent_id = record.get(0).unwrap().to_string();
        let entity_id = record.get(1).unwrap().to_string();
        let mut values = Vec::with_capacity(feature_dim + 1);
        for field in record.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| IoError::Format {
                row,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(IoError::Format {
                    row,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        let y = values.pop().unwrap();
        let x = DVector::from_vec(values);

        let ai = *agent_index.entry(agent_id.clone()).or_insert_with(|| {
            agents.push(Agent {
                id: agent_id.clone(),
                entities: Vec::new(),
            });
            agents.len() - 1
        });
        let ei = *entity_index
            .entry((ai, entity_id))
            .or_insert_with(|| {
                agents[ai].entities.push(Entity::default());
                agents[ai].entities.len() - 1
            });
        agents[ai].entities[ei].events.push(Event { x, y });
    }
    let data = HierDataset {
        feature_dim,
        agents,
    };
    data.validate()?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Manifest and ground truth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dim: usize,
    pub num_agents: usize,
    pub num_entities: usize,
    pub num_events: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub generator: GeneratorConfig,
    pub ground_truth: Option<String>,
}

/// Serialized latent variables; labels are stored 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub version: u32,
    pub w: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub z: Vec<Vec<usize>>,
}

impl GroundTruthFile {
    pub fn from_truth(truth: &GroundTruth) -> Self {
        GroundTruthFile {
            version: 1,
            w: truth.w.iter().map(|w| w.iter().cloned().collect()).collect(),
            psi: truth.psi.clone(),
            theta: truth.theta.clone(),
            z: truth
                .z
                .iter()
                .map(|row| row.iter().map(|&z| z + 1).collect())
                .collect(),
        }
    }

    /// 0-based labels, flattened per agent.
    pub fn labels_internal(&self) -> Result<Vec<Vec<usize>>, IoError> {
        self.z
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&z| {
                        z.checked_sub(1).ok_or_else(|| {
                            IoError::Invalid("ground-truth labels are 1-based".into())
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Model checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    /// "centralized" or "federated".
    pub mode: String,
    pub hyperparams: Hyperparams,
    pub feature_dim: usize,
    /// Sweep (centralized) or round (federated) the state was taken at.
    pub step: usize,
    /// Per-cluster D (row-major F×F) and c. H is never persisted.
    pub clusters: Vec<CheckpointCluster>,
    /// Per-cluster entity counts: exact integers for centralized runs,
    /// γ-smoothed values for federated ones.
    pub counts: Vec<f64>,
    /// agent id → 1-based entity labels; present for centralized runs.
    pub labels: Option<BTreeMap<String, Vec<usize>>>,
    /// PRNG descriptor for provenance, e.g. "chacha20/seed=42".
    pub rng: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointCluster {
    pub d: Vec<f64>,
    pub c: Vec<f64>,
}

fn matrix_to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn matrix_from_row_major(data: &[f64], dim: usize) -> Result<DMatrix<f64>, IoError> {
    if data.len() != dim * dim {
        return Err(IoError::Invalid(format!(
            "matrix payload has {} entries, expected {}",
            data.len(),
            dim * dim
        )));
    }
    Ok(DMatrix::from_fn(dim, dim, |r, c| data[r * dim + c]))
}

impl ModelCheckpoint {
    pub fn from_centralized(
        hp: &Hyperparams,
        data: &HierDataset,
        labels: &LabelAssignment,
        stats: &ClusterStats,
        step: usize,
    ) -> Self {
        let label_map = data
            .agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                (
                    agent.id.clone(),
                    labels.z[i].iter().map(|&z| z + 1).collect(),
                )
            })
            .collect();
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            mode: "centralized".into(),
            hyperparams: hp.clone(),
            feature_dim: data.feature_dim,
            step,
            clusters: Self::pack_clusters(stats),
            counts: labels.global.iter().map(|&c| c as f64).collect(),
            labels: Some(label_map),
            rng: format!("chacha20/seed={}", hp.seed),
        }
    }

    pub fn from_federated(hp: &Hyperparams, model: &GlobalModel, seed: u64) -> Self {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            mode: "federated".into(),
            hyperparams: hp.clone(),
            feature_dim: model.stats.clusters[0].h.dim(),
            step: model.round,
            clusters: Self::pack_clusters(&model.stats),
            counts: model.counts.clone(),
            labels: None,
            rng: format!("chacha20/seed={seed}"),
        }
    }

    fn pack_clusters(stats: &ClusterStats) -> Vec<CheckpointCluster> {
        stats
            .clusters
            .iter()
            .map(|cluster| CheckpointCluster {
                d: matrix_to_row_major(cluster.d.as_matrix()),
                c: cluster.c.iter().cloned().collect(),
            })
            .collect()
    }

    /// Rebuilds cluster statistics; H is freshly inverted from D.
    pub fn stats(&self) -> Result<ClusterStats, IoError> {
        let f = self.feature_dim;
        let clusters = self
            .clusters
            .iter()
            .map(|cluster| {
                if cluster.c.len() != f {
                    return Err(IoError::Invalid(format!(
                        "moment vector has {} entries, expected {f}",
                        cluster.c.len()
                    )));
                }
                let d = SpdMatrix::from_matrix(matrix_from_row_major(&cluster.d, f)?)
                    .map_err(|e| IoError::Invalid(e.to_string()))?;
                let h = d.invert().map_err(|e| IoError::Invalid(e.to_string()))?;
                Ok(crate::model::Cluster {
                    d,
                    c: DVector::from_vec(cluster.c.clone()),
                    h,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Ok(ClusterStats { clusters })
    }

    /// 0-based labels aligned with a dataset's agent/entity order, when
    /// the checkpoint stores labels covering that dataset.
    pub fn labels_for(&self, data: &HierDataset) -> Option<Vec<Vec<Option<usize>>>> {
        let map = self.labels.as_ref()?;
        Some(
            data.agents
                .iter()
                .map(|agent| match map.get(&agent.id) {
                    Some(row) => agent
                        .entities
                        .iter()
                        .enumerate()
                        .map(|(j, _)| row.get(j).map(|&z| z - 1))
                        .collect(),
                    None => vec![None; agent.entities.len()],
                })
                .collect(),
        )
    }

    pub fn validate_against(&self, data: &HierDataset) -> Result<(), IoError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(IoError::Invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.feature_dim != data.feature_dim {
            return Err(IoError::Invalid(format!(
                "checkpoint feature_dim {} does not match dataset {}",
                self.feature_dim, data.feature_dim
            )));
        }
        if self.clusters.len() != self.hyperparams.k {
            return Err(IoError::Invalid(format!(
                "checkpoint has {} clusters but k = {}",
                self.clusters.len(),
                self.hyperparams.k
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trace CSVs

pub fn write_sweep_trace_csv(path: &Path, trace: &[SweepTrace]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep",
        "label_changes",
        "log_posterior",
        "mse_train",
        "mse_heldout",
    ])?;
    for row in trace {
        w.write_record([
            row.sweep.to_string(),
            row.label_changes.to_string(),
            row.log_posterior_proxy.to_string(),
            row.mse_train.to_string(),
            row.mse_heldout.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_round_trace_csv(path: &Path, trace: &[RoundTrace]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "mse_train",
        "mse_heldout",
        "agents_sampled",
        "label_changes",
    ])?;
    for row in trace {
        w.write_record([
            row.round.to_string(),
            row.mse_train.to_string(),
            row.mse_heldout.map_or(String::new(), |v| v.to_string()),
            row.agents_sampled.to_string(),
            row.label_changes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Predictions CSV: one row per event with its chosen cluster (1-based).
pub fn write_predictions_csv(
    path: &Path,
    rows: &[PredictionRow],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "agent_id",
        "entity_id",
        "event_index",
        "y_true",
        "y_pred",
        "cluster",
    ])?;
    for row in rows {
        w.write_record([
            row.agent_id.clone(),
            row.entity_id.to_string(),
            row.event_index.to_string(),
            row.y_true.to_string(),
            row.y_pred.to_string(),
            (row.cluster + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub agent_id: String,
    pub entity_id: usize,
    pub event_index: usize,
    pub y_true: f64,
    pub y_pred: f64,
    /// 0-based internally; written 1-based.
    pub cluster: usize,
}

// ---------------------------------------------------------------------------
// Agent-update wire envelope

/// Versioned JSON envelope for one agent's round contribution. The
/// in-process simulator passes [`AgentUpdate`] values directly; this
/// serialization exists so a networked deployment can reuse the exact
/// same payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentUpdateWire {
    pub version: u32,
    pub round: usize,
    pub agent_id: String,
    pub k: usize,
    pub f: usize,
    pub clusters: Vec<WireClusterDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireClusterDelta {
    /// Row-major F×F.
    pub d: Vec<f64>,
    pub c: Vec<f64>,
    pub n: u64,
}

pub fn agent_update_to_wire(update: &AgentUpdate, feature_dim: usize) -> AgentUpdateWire {
    AgentUpdateWire {
        version: WIRE_VERSION,
        round: update.round,
        agent_id: update.agent_id.clone(),
        k: update.deltas.len(),
        f: feature_dim,
        clusters: update
            .deltas
            .iter()
            .map(|delta| WireClusterDelta {
                d: matrix_to_row_major(&delta.d),
                c: delta.c.iter().cloned().collect(),
                n: delta.entities,
            })
            .collect(),
    }
}

pub fn agent_update_from_wire(wire: &AgentUpdateWire) -> Result<AgentUpdate, IoError> {
    if wire.version != WIRE_VERSION {
        return Err(IoError::Invalid(format!(
            "unsupported wire version {}",
            wire.version
        )));
    }
    if wire.clusters.len() != wire.k {
        return Err(IoError::Invalid(format!(
            "wire update declares k = {} but carries {} clusters",
            wire.k,
            wire.clusters.len()
        )));
    }
    let deltas = wire
        .clusters
        .iter()
        .map(|cluster| {
            if cluster.c.len() != wire.f {
                return Err(IoError::Invalid(format!(
                    "wire moment vector has {} entries, expected {}",
                    cluster.c.len(),
                    wire.f
                )));
            }
            Ok(ClusterDelta {
                d: matrix_from_row_major(&cluster.d, wire.f)?,
                c: DVector::from_vec(cluster.c.clone()),
                entities: cluster.n,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(AgentUpdate {
        agent_id: wire.agent_id.clone(),
        round: wire.round,
        deltas,
    })
}

/// Writes a string to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
