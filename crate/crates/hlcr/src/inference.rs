//! Collapsed Gibbs sampling for the hierarchical latent class regression
//! model.
//!
//! Labels are resampled one agent-entity pair at a time from
//!
//! ```text
//! p(z_ij = k | rest) ∝ prior(k) · p(y_ij | cluster k stats without ij)
//! ```
//!
//! where the prior comes from the collapsed asymmetric Dirichlet counts
//! and the likelihood is a product of one-step Gaussian predictives,
//! advanced event by event with rank-one inverse updates. All
//! probability accumulation is in log space: with tens of events per
//! entity the raw product underflows f64.
//!
//! A note on the predictive variance: substituting the Woodbury identity
//! into the post-update form σ²/(1 − (1/σ²)xᵀAₙ⁻¹x) yields
//! σ² + xᵀAₙ₋₁⁻¹x, which is what this module uses. Both forms are
//! implemented ([`sequential_predictive`] and
//! [`sequential_predictive_alt`]) and checked against each other and
//! against direct marginalization in the test suite.

use nalgebra::DVector;
use rand::Rng;

use crate::linalg::SpdMatrix;
use crate::model::{
    compute_cluster_stats, sample_categorical, ClusterStats, Event, HierDataset,
    Hyperparams, LabelAssignment, ModelError,
};

/// Rebuild all sufficient statistics from scratch every this many
/// sweeps, bounding rank-one rounding drift.
pub const REBUILD_INTERVAL: usize = 50;

/// Unnormalized log posterior over cluster labels plus its normalized
/// form (via max-shifted log-sum-exp).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPosterior {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LabelPosterior {
    pub fn from_log(log_probs: Vec<f64>) -> Self {
        assert!(!log_probs.is_empty());
        let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_probs.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = unnorm.iter().sum();
        let probs = unnorm.iter().map(|&u| u / sum).collect();
        LabelPosterior { log_probs, probs }
    }

    /// Highest-probability label; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (idx, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = idx;
            }
        }
        best
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

/// Collapsed label prior: with ψ and θ_i integrated out, the prior mass
/// of cluster k for one entity of agent i is
///
/// ```text
/// (N_i⁽ᵏ⁾ + β·(N⁽ᵏ⁾ + α/K)/(Σ N⁽ᵏ⁾ + α)) / (Σ N_i⁽ᵏ⁾ + β)
/// ```
///
/// Counts must exclude the entity being resampled. Sums to one by
/// construction.
pub fn label_prior(agent_counts: &[f64], global_counts: &[f64], hp: &Hyperparams) -> Vec<f64> {
    assert_eq!(agent_counts.len(), global_counts.len());
    let k = agent_counts.len() as f64;
    let global_total: f64 = global_counts.iter().sum();
    let agent_total: f64 = agent_counts.iter().sum();
    agent_counts
        .iter()
        .zip(global_counts)
        .map(|(&ni, &n)| {
            (ni + hp.beta * (n + hp.alpha / k) / (global_total + hp.alpha))
                / (agent_total + hp.beta)
        })
        .collect()
}

fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// Log-likelihood of an entity's targets under cluster statistics that
/// exclude the entity: Σₙ log N(yₙ; bₙ₋₁ᵀAₙ₋₁⁻¹xₙ, σ² + xₙᵀAₙ₋₁⁻¹xₙ),
/// advancing (A⁻¹, b) by one rank-one update per event.
pub fn sequential_predictive(
    events: &[Event],
    h0: &SpdMatrix,
    c0: &DVector<f64>,
    sigma: f64,
) -> f64 {
    let s = 1.0 / (sigma * sigma);
    let mut h = h0.clone();
    let mut b = c0.clone();
    let mut loglik = 0.0;
    for ev in events {
        let hx = h.mul_vec(&ev.x);
        let mean = b.dot(&hx);
        let var = sigma * sigma + ev.x.dot(&hx);
        loglik += log_normal_pdf(ev.y, mean, var);
        h = h.rank1_update_inverse(&ev.x, s);
        b.axpy(s * ev.y, &ev.x, 1.0);
    }
    loglik
}

/// Same likelihood through the pre-Woodbury route: each step first forms
/// Aₙ⁻¹ and evaluates
/// mean = bₙ₋₁ᵀAₙ⁻¹x / (1 − (1/σ²)xᵀAₙ⁻¹x),
/// var = σ² / (1 − (1/σ²)xᵀAₙ⁻¹x).
/// Algebraically identical to [`sequential_predictive`]; kept as an
/// independent route for equivalence testing.
pub fn sequential_predictive_alt(
    events: &[Event],
    h0: &SpdMatrix,
    c0: &DVector<f64>,
    sigma: f64,
) -> f64 {
    let s = 1.0 / (sigma * sigma);
    let mut h = h0.clone();
    let mut b = c0.clone();
    let mut loglik = 0.0;
    for ev in events {
        let h_next = h.rank1_update_inverse(&ev.x, s);
        let hx = h_next.mul_vec(&ev.x);
        let denom = 1.0 - s * ev.x.dot(&hx);
        let mean = b.dot(&hx) / denom;
        let var = sigma * sigma / denom;
        loglik += log_normal_pdf(ev.y, mean, var);
        h = h_next;
        b.axpy(s * ev.y, &ev.x, 1.0);
    }
    loglik
}

/// Full conditional over labels for one entity. `stats` and both count
/// views must already exclude the entity.
pub fn label_posterior(
    events: &[Event],
    stats: &ClusterStats,
    agent_counts: &[f64],
    global_counts: &[f64],
    hp: &Hyperparams,
) -> LabelPosterior {
    let prior = label_prior(agent_counts, global_counts, hp);
    let log_probs = stats
        .clusters
        .iter()
        .zip(&prior)
        .map(|(cluster, &p)| {
            p.ln() + sequential_predictive(events, &cluster.h, &cluster.c, hp.sigma)
        })
        .collect();
    LabelPosterior::from_log(log_probs)
}

/// Draws a new label for one entity from its full conditional.
pub fn sample_label<R: Rng>(
    events: &[Event],
    stats: &ClusterStats,
    agent_counts: &[f64],
    global_counts: &[f64],
    hp: &Hyperparams,
    rng: &mut R,
) -> usize {
    label_posterior(events, stats, agent_counts, global_counts, hp).sample(rng)
}

/// Adds an entity's events to cluster k, events in ascending order.
pub fn add_entity(stats: &mut ClusterStats, events: &[Event], k: usize, hp: &Hyperparams) {
    let s = hp.noise_precision();
    let cluster = &mut stats.clusters[k];
    for ev in events {
        cluster.c.axpy(s * ev.y, &ev.x, 1.0);
        cluster.h = cluster.h.rank1_update_inverse(&ev.x, s);
        cluster.d.add_scaled_outer(&ev.x, s);
    }
}

/// Removes an entity's events from cluster k, events in descending
/// order. A singular downdate falls back to direct inversion of the
/// shadow D.
pub fn remove_entity(stats: &mut ClusterStats, events: &[Event], k: usize, hp: &Hyperparams) {
    let s = hp.noise_precision();
    let cluster = &mut stats.clusters[k];
    for ev in events.iter().rev() {
        cluster.c.axpy(-s * ev.y, &ev.x, 1.0);
        cluster.d.add_scaled_outer(&ev.x, -s);
        match cluster.h.rank1_downdate_inverse(&ev.x, s) {
            Ok(h) => cluster.h = h,
            Err(_) => {
                cluster
                    .rebuild_inverse()
                    .expect("shadow D stays SPD while the prior term remains");
            }
        }
    }
}

/// Outcome of one full Gibbs sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    pub label_changes: usize,
    /// Sum over entities of the normalized log probability of the label
    /// that was drawn; a cheap convergence proxy.
    pub log_posterior_proxy: f64,
}

/// Mutable sampler state: label assignment plus incrementally maintained
/// cluster statistics over a fixed dataset.
pub struct GibbsState<'a> {
    data: &'a HierDataset,
    hp: &'a Hyperparams,
    pub labels: LabelAssignment,
    pub stats: ClusterStats,
    sweeps_since_rebuild: usize,
}

impl<'a> GibbsState<'a> {
    /// Uniform random label initialization followed by batch statistics.
    pub fn init<R: Rng>(
        data: &'a HierDataset,
        hp: &'a Hyperparams,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let z = data
            .agents
            .iter()
            .map(|a| {
                a.entities
                    .iter()
                    .map(|_| rng.random_range(0..hp.k))
                    .collect()
            })
            .collect();
        Self::with_labels(data, hp, LabelAssignment::from_labels(z, hp.k))
    }

    pub fn with_labels(
        data: &'a HierDataset,
        hp: &'a Hyperparams,
        labels: LabelAssignment,
    ) -> Result<Self, ModelError> {
        data.validate()?;
        hp.validate()?;
        let stats = compute_cluster_stats(data, &labels, hp)?;
        Ok(GibbsState {
            data,
            hp,
            labels,
            stats,
            sweeps_since_rebuild: 0,
        })
    }

    /// One full sweep: agents then entities in ascending index, each
    /// entity removed, resampled against the remainder, and re-added.
    pub fn sweep<R: Rng>(&mut self, rng: &mut R) -> SweepOutcome {
        let mut changes = 0;
        let mut log_post = 0.0;
        for (i, agent) in self.data.agents.iter().enumerate() {
            for (j, entity) in agent.entities.iter().enumerate() {
                let old = self.labels.z[i][j];
                remove_entity(&mut self.stats, &entity.events, old, self.hp);
                self.labels.exclude(i, j);
                let agent_counts: Vec<f64> =
                    self.labels.per_agent[i].iter().map(|&c| c as f64).collect();
                let global_counts: Vec<f64> =
                    self.labels.global.iter().map(|&c| c as f64).collect();
                let posterior = label_posterior(
                    &entity.events,
                    &self.stats,
                    &agent_counts,
                    &global_counts,
                    self.hp,
                );
                let new = posterior.sample(rng);
                log_post += posterior.probs[new].ln();
                self.labels.set(i, j, new);
                add_entity(&mut self.stats, &entity.events, new, self.hp);
                if new != old {
                    changes += 1;
                }
            }
        }
        self.sweeps_since_rebuild += 1;
        if self.sweeps_since_rebuild >= REBUILD_INTERVAL {
            self.rebuild();
        }
        SweepOutcome {
            label_changes: changes,
            log_posterior_proxy: log_post,
        }
    }

    /// Recomputes all statistics from the data and current labels.
    pub fn rebuild(&mut self) {
        self.stats = compute_cluster_stats(self.data, &self.labels, self.hp)
            .expect("batch statistics of valid data are SPD");
        self.sweeps_since_rebuild = 0;
    }
}

/// Per-sweep trace row emitted by [`train_centralized`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTrace {
    pub sweep: usize,
    pub label_changes: usize,
    pub log_posterior_proxy: f64,
    pub mse_train: f64,
    pub mse_heldout: Option<f64>,
}

/// Runs T full Gibbs sweeps over the dataset and returns the final
/// state plus a per-sweep trace. The trace reports the last sweep's
/// state; no burn-in or averaging is applied.
pub fn train_centralized<R: Rng>(
    data: &HierDataset,
    hp: &Hyperparams,
    rng: &mut R,
    heldout: Option<&HierDataset>,
) -> Result<(LabelAssignment, ClusterStats, Vec<SweepTrace>), ModelError> {
    let mut state = GibbsState::init(data, hp, rng)?;
    let mut trace = Vec::with_capacity(hp.t);
    for sweep in 1..=hp.t {
        let outcome = state.sweep(rng);
        trace.push(SweepTrace {
            sweep,
            label_changes: outcome.label_changes,
            log_posterior_proxy: outcome.log_posterior_proxy,
            mse_train: mse_with_labels(data, &state.labels, &state.stats),
            mse_heldout: heldout.map(|h| mse_with_labels(h, &state.labels, &state.stats)),
        });
    }
    Ok((state.labels, state.stats, trace))
}

/// Ridge prediction for cluster k: cᵀHx.
pub fn predict(x: &DVector<f64>, k: usize, stats: &ClusterStats) -> f64 {
    let cluster = &stats.clusters[k];
    cluster.c.dot(&cluster.h.mul_vec(x))
}

/// MSE of stored-label predictions over a dataset whose (i, j) indices
/// align with the assignment. Entities with no events contribute
/// nothing; an empty dataset scores 0.
pub fn mse_with_labels(
    data: &HierDataset,
    labels: &LabelAssignment,
    stats: &ClusterStats,
) -> f64 {
    let mut sq = 0.0;
    let mut n = 0usize;
    for (i, agent) in data.agents.iter().enumerate() {
        for (j, entity) in agent.entities.iter().enumerate() {
            let k = labels.z[i][j];
            for ev in &entity.events {
                let e = ev.y - predict(&ev.x, k, stats);
                sq += e * e;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sq / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Pick the posterior mode; ties break toward the lowest index.
    Argmax,
    /// Draw from the posterior.
    Sample,
}

/// Two-step prediction for an entity that was not necessarily in
/// training: choose a label (stored if known, otherwise from the
/// posterior over the entity's history, prior-only when the history is
/// empty), then apply the cluster's ridge predictor.
#[allow(clippy::too_many_arguments)]
pub fn predict_entity<R: Rng>(
    history: &[Event],
    x_new: &DVector<f64>,
    stored: Option<usize>,
    stats: &ClusterStats,
    agent_counts: &[f64],
    global_counts: &[f64],
    hp: &Hyperparams,
    mode: PredictMode,
    rng: &mut R,
) -> (f64, usize) {
    let label = match stored {
        Some(k) => k,
        None => {
            let posterior =
                label_posterior(history, stats, agent_counts, global_counts, hp);
            match mode {
                PredictMode::Argmax => posterior.argmax(),
                PredictMode::Sample => posterior.sample(rng),
            }
        }
    };
    (predict(x_new, label, stats), label)
}

/// Convenience wrapper over [`label_posterior`] for entities outside
/// any agent context (zero agent counts).
pub fn entity_label_posterior(
    history: &[Event],
    stats: &ClusterStats,
    global_counts: &[f64],
    hp: &Hyperparams,
) -> LabelPosterior {
    let zeros = vec![0.0; stats.k()];
    label_posterior(history, stats, &zeros, global_counts, hp)
}
