//! Domain types and the synthetic data generator.
//!
//! Data is hierarchical: agents own entities, entities own events, and
//! every event of one agent-entity pair shares a single cluster label.
//! An event is a feature vector `x` with a scalar target `y`, generated
//! (synthetically) as `y = w_zᵀx + noise` for the cluster's coefficient
//! vector `w_z`.
//!
//! Cluster labels are 0-based everywhere in this crate; serialized files
//! use 1-based labels (the conversion happens in [`crate::io`]).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, SpdMatrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),
    #[error("internal linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
}

/// Model and training hyperparameters.
///
/// `alpha` and `beta` are the global and per-agent Dirichlet
/// concentrations, `delta` the coefficient prior std, `sigma` the noise
/// std, `k` the cluster count, `gamma` the federated learning rate, and
/// `t` the sweep/round count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub sigma: f64,
    pub k: usize,
    pub gamma: f64,
    pub t: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta", self.delta),
            ("sigma", self.sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidHyperparam(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.k == 0 {
            return Err(ModelError::InvalidHyperparam("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ModelError::InvalidHyperparam(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.t == 0 {
            return Err(ModelError::InvalidHyperparam("t must be >= 1".into()));
        }
        Ok(())
    }

    /// 1/σ², the precision scale used by all sufficient statistics.
    pub fn noise_precision(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }

    /// 1/δ², the prior precision on coefficients.
    pub fn prior_precision(&self) -> f64 {
        1.0 / (self.delta * self.delta)
    }
}

/// One observation: features and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub x: DVector<f64>,
    pub y: f64,
}

/// All events of one agent-entity pair; they share a cluster label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Entity {
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: String,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierDataset {
    pub feature_dim: usize,
    pub agents: Vec<Agent>,
}

impl HierDataset {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_entities(&self) -> usize {
        self.agents.iter().map(|a| a.entities.len()).sum()
    }

    pub fn num_events(&self) -> usize {
        self.agents
            .iter()
            .flat_map(|a| &a.entities)
            .map(|e| e.events.len())
            .sum()
    }

    /// Checks dimensional consistency, finiteness, and id uniqueness.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidShape("feature_dim must be >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for agent in &self.agents {
            if !seen.insert(&agent.id) {
                return Err(ModelError::InvalidShape(format!(
                    "duplicate agent id {:?}",
                    agent.id
                )));
            }
            for entity in &agent.entities {
                for ev in &entity.events {
                    if ev.x.len() != self.feature_dim {
                        return Err(ModelError::InvalidShape(format!(
                            "event in agent {:?} has dimension {}, expected {}",
                            agent.id,
                            ev.x.len(),
                            self.feature_dim
                        )));
                    }
                    if !ev.y.is_finite() || ev.x.iter().any(|v| !v.is_finite()) {
                        return Err(ModelError::InvalidShape(format!(
                            "non-finite value in agent {:?}",
                            agent.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Splits each entity's events into a leading train part and a
    /// trailing held-out part (`fraction` of events, rounded down; an
    /// entity keeps at least one training event). Both halves preserve
    /// the agent/entity structure so (i, j) indices line up.
    pub fn split_holdout(&self, fraction: f64) -> (HierDataset, HierDataset) {
        assert!((0.0..1.0).contains(&fraction), "fraction must be in [0, 1)");
        let mut train = HierDataset {
            feature_dim: self.feature_dim,
            agents: Vec::with_capacity(self.agents.len()),
        };
        let mut held = train.clone();
        for agent in &self.agents {
            let mut ta = Agent {
                id: agent.id.clone(),
                entities: Vec::with_capacity(agent.entities.len()),
            };
            let mut ha = ta.clone();
            for entity in &agent.entities {
                let n = entity.events.len();
                let n_held = ((n as f64) * fraction).floor() as usize;
                let n_held = n_held.min(n.saturating_sub(1));
                let cut = n - n_held;
                ta.entities.push(Entity {
                    events: entity.events[..cut].to_vec(),
                });
                ha.entities.push(Entity {
                    events: entity.events[cut..].to_vec(),
                });
            }
            train.agents.push(ta);
            held.agents.push(ha);
        }
        (train, held)
    }
}

/// Cluster labels per agent-entity pair plus derived counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub k: usize,
    /// z[i][j]: 0-based cluster label of entity j in agent i.
    pub z: Vec<Vec<usize>>,
    /// per_agent[i][k]: entities of agent i labeled k.
    pub per_agent: Vec<Vec<u64>>,
    /// global[k]: entities labeled k across all agents.
    pub global: Vec<u64>,
}

impl LabelAssignment {
    pub fn from_labels(z: Vec<Vec<usize>>, k: usize) -> Self {
        let mut out = LabelAssignment {
            k,
            z,
            per_agent: Vec::new(),
            global: vec![0; k],
        };
        out.per_agent = vec![vec![0; k]; out.z.len()];
        for (i, row) in out.z.iter().enumerate() {
            for &label in row {
                assert!(label < k, "label out of range");
                out.per_agent[i][label] += 1;
                out.global[label] += 1;
            }
        }
        out
    }

    /// Recomputes all counts from the z map. The result always equals
    /// incrementally maintained counts.
    pub fn recount(&self) -> Self {
        Self::from_labels(self.z.clone(), self.k)
    }

    /// Drops entity (i, j) from the counts (the ∖ij convention). The z
    /// entry itself is left untouched until `set`.
    pub fn exclude(&mut self, i: usize, j: usize) {
        let label = self.z[i][j];
        self.per_agent[i][label] -= 1;
        self.global[label] -= 1;
    }

    /// Assigns label k to entity (i, j), which must currently be
    /// excluded from the counts.
    pub fn set(&mut self, i: usize, j: usize, label: usize) {
        assert!(label < self.k);
        self.z[i][j] = label;
        self.per_agent[i][label] += 1;
        self.global[label] += 1;
    }

    pub fn counts_consistent(&self) -> bool {
        *self == self.recount()
    }
}

/// Per-cluster sufficient statistics:
/// D = (1/δ²)I + (1/σ²)XᵀX, c = (1/σ²)Xᵀy, and the cached H = D⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub d: SpdMatrix,
    pub c: DVector<f64>,
    pub h: SpdMatrix,
}

impl Cluster {
    /// Prior-only statistics of an empty cluster: D = (1/δ²)I, c = 0,
    /// H = δ²I.
    pub fn prior_only(feature_dim: usize, hp: &Hyperparams) -> Self {
        Cluster {
            d: SpdMatrix::scaled_identity(feature_dim, hp.prior_precision()),
            c: DVector::zeros(feature_dim),
            h: SpdMatrix::scaled_identity(feature_dim, hp.delta * hp.delta),
        }
    }

    /// H ← D⁻¹ by direct inversion.
    pub fn rebuild_inverse(&mut self) -> Result<(), LinalgError> {
        self.h = self.d.invert()?;
        Ok(())
    }
}

impl ClusterStats {
    pub fn prior_only(k: usize, feature_dim: usize, hp: &Hyperparams) -> Self {
        ClusterStats {
            clusters: (0..k).map(|_| Cluster::prior_only(feature_dim, hp)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }
}

/// Exact batch computation of the per-cluster statistics. Empty clusters
/// get the prior-only values.
pub fn compute_cluster_stats(
    data: &HierDataset,
    labels: &LabelAssignment,
    hp: &Hyperparams,
) -> Result<ClusterStats, ModelError> {
    let f = data.feature_dim;
    let s = hp.noise_precision();
    let mut stats = ClusterStats::prior_only(hp.k, f, hp);
    for (i, agent) in data.agents.iter().enumerate() {
        for (j, entity) in agent.entities.iter().enumerate() {
            let k = labels.z[i][j];
            let cluster = &mut stats.clusters[k];
            for ev in &entity.events {
                cluster.d.add_scaled_outer(&ev.x, s);
                cluster.c.axpy(s * ev.y, &ev.x, 1.0);
            }
        }
    }
    for cluster in &mut stats.clusters {
        cluster.rebuild_inverse()?;
    }
    Ok(stats)
}

/// Latent variables used to generate a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub w: Vec<DVector<f64>>,
    pub psi: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub z: Vec<Vec<usize>>,
}

/// Shape knobs for the generator, mirroring the dataset family used in
/// evaluation: `mean_entities` entities per agent and `mean_events`
/// events per entity on average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_agents: usize,
    pub feature_dim: usize,
    pub mean_entities: f64,
    pub mean_events: f64,
    /// Append a constant-1 bias coordinate after the Gaussian features.
    pub bias_column: bool,
}

/// Samples a dataset from the generative model:
/// w_k ~ N(0, δ²I), ψ ~ Dir(α·(1/K, …, 1/K)), θ_i ~ Dir(βψ),
/// z_ij ~ Cat(θ_i), x per coordinate ~ N(0, 1), y ~ N(w_zᵀx, σ²).
///
/// Entity and event counts are shifted Poisson: max(1, Poisson(mean−1)+1).
/// The feature distribution and count law are not pinned down by the
/// model itself; standard normal features and shifted Poisson counts are
/// this crate's documented defaults.
pub fn generate_synthetic<R: Rng>(
    hp: &Hyperparams,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<(HierDataset, GroundTruth), ModelError> {
    hp.validate()?;
    if cfg.num_agents == 0 || cfg.feature_dim == 0 {
        return Err(ModelError::InvalidShape(
            "num_agents and feature_dim must be >= 1".into(),
        ));
    }
    if cfg.mean_entities < 1.0 || cfg.mean_events < 1.0 {
        return Err(ModelError::InvalidShape(
            "mean entity/event counts must be >= 1".into(),
        ));
    }

    let f = cfg.feature_dim + usize::from(cfg.bias_column);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coeff_prior = Normal::new(0.0, hp.delta).expect("coefficient prior");

    let w: Vec<DVector<f64>> = (0..hp.k)
        .map(|_| DVector::from_fn(f, |_, _| coeff_prior.sample(rng)))
        .collect();
    let psi = sample_dirichlet(&vec![hp.alpha / hp.k as f64; hp.k], rng);

    let mut agents = Vec::with_capacity(cfg.num_agents);
    let mut theta_all = Vec::with_capacity(cfg.num_agents);
    let mut z_all = Vec::with_capacity(cfg.num_agents);
    for i in 0..cfg.num_agents {
        let theta = sample_dirichlet(
            &psi.iter().map(|p| hp.beta * p).collect::<Vec<_>>(),
            rng,
        );
        let n_entities = shifted_poisson(cfg.mean_entities, rng);
        let mut entities = Vec::with_capacity(n_entities);
        let mut z_row = Vec::with_capacity(n_entities);
        for _ in 0..n_entities {
            let z = sample_categorical(&theta, rng);
            let n_events = shifted_poisson(cfg.mean_events, rng);
            let mut events = Vec::with_capacity(n_events);
            for _ in 0..n_events {
                let mut x = DVector::from_fn(f, |_, _| std_normal.sample(rng));
                if cfg.bias_column {
                    x[f - 1] = 1.0;
                }
                let mean = w[z].dot(&x);
                let y = mean + hp.sigma * std_normal.sample(rng);
                events.push(Event { x, y });
            }
            entities.push(Entity { events });
            z_row.push(z);
        }
        agents.push(Agent {
            id: format!("agent_{i:04}"),
            entities,
        });
        theta_all.push(theta);
        z_all.push(z_row);
    }

    Ok((
        HierDataset {
            feature_dim: f,
            agents,
        },
        GroundTruth {
            w,
            psi,
            theta: theta_all,
            z: z_all,
        },
    ))
}

/// Dirichlet draw as normalized Gamma variates. Retries on the (measure
/// zero, but floating-point reachable for tiny concentrations) all-zero
/// outcome.
pub fn sample_dirichlet<R: Rng>(alphas: &[f64], rng: &mut R) -> Vec<f64> {
    assert!(!alphas.is_empty());
    assert!(alphas.iter().all(|&a| a > 0.0 && a.is_finite()));
    loop {
        let draws: Vec<f64> = alphas
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("valid gamma shape").sample(rng))
            .collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.iter().map(|d| d / sum).collect();
        }
    }
}

/// Categorical draw from a probability vector (assumed normalized).
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    probs.len() - 1
}

/// max(1, Poisson(mean − 1) + 1): strictly positive with the given mean.
fn shifted_poisson<R: Rng>(mean: f64, rng: &mut R) -> usize {
    let lambda = mean - 1.0;
    if lambda <= 0.0 {
        return 1;
    }
    let draw = Poisson::new(lambda).expect("positive lambda").sample(rng);
    (draw as usize).max(0) + 1
}
