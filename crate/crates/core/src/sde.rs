//! Euler-Maruyama integration of the N-particle system with the smoothly
//! truncated kernel, counter-based reproducible noise, collision monitoring,
//! and ensemble statistics.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::FlowMatrix;
use crate::grid::{GridDensity, InitialLaw};
use crate::potentials::{PotentialSpec, TruncationParams};
use crate::rng::{stream, StreamKind};
use crate::spectral::trilinear;
use crate::util::{mean_se, KahanSum};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpsilonPolicy {
    /// Keep the initial truncation radius for the whole run.
    Fixed,
    /// Halve epsilon whenever min_dist < 2 epsilon, mirroring the stopping
    /// time construction; every halving is logged.
    HalveOnApproach,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdeConfig {
    pub n_particles: usize,
    pub sigma: f64,
    pub dt: f64,
    pub t_final: f64,
    pub epsilon0: f64,
    pub epsilon_policy: EpsilonPolicy,
    pub seed: u64,
    /// Kernel scale multiplying the drift; 0 disables interaction.
    pub coupling: f64,
    pub snapshot_times: Vec<f64>,
}

impl SdeConfig {
    pub fn new(n_particles: usize, sigma: f64, dt: f64, t_final: f64, seed: u64) -> Self {
        Self {
            n_particles,
            sigma,
            dt,
            t_final,
            epsilon0: 1e-3,
            epsilon_policy: EpsilonPolicy::HalveOnApproach,
            seed,
            coupling: 1.0,
            snapshot_times: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config(format!(
                "need at least 2 particles, got {}",
                self.n_particles
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.dt > 0.0) || self.t_final < 0.0 {
            return Err(Error::Config("dt must be positive and t_final nonnegative".into()));
        }
        if self.t_final > 0.0 && self.dt > self.t_final {
            return Err(Error::Config(format!(
                "dt = {} exceeds t_final = {}",
                self.dt, self.t_final
            )));
        }
        if !(self.epsilon0 > 0.0) {
            return Err(Error::Config(format!(
                "epsilon0 must be positive, got {}",
                self.epsilon0
            )));
        }
        Ok(())
    }
}

/// One trajectory's positions plus the counters that make it reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleState {
    pub positions: Array2<f64>,
    pub t: f64,
    pub step: u64,
    pub seed: u64,
    pub epsilon: f64,
    pub min_dist: f64,
}

pub fn min_pairwise_distance(positions: ArrayView2<'_, f64>) -> f64 {
    let n = positions.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for c in 0..positions.ncols() {
                let d = positions[[i, c]] - positions[[j, c]];
                d2 += d * d;
            }
            best = best.min(d2);
        }
    }
    best.sqrt()
}

fn draw_position(law: &InitialLaw, seed: u64, unit: u64, attempt: u64) -> [f64; 3] {
    let mut rng = stream(seed, StreamKind::Init, unit, attempt);
    match law {
        InitialLaw::Gaussian { center, std } => {
            let mut x = [0.0; 3];
            for (c, xi) in x.iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                *xi = center[c] + std * g;
            }
            x
        }
        InitialLaw::GaussianMixture { components } => {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            let pick: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = &components[0];
            for comp in components {
                acc += comp.weight;
                if pick <= acc {
                    chosen = comp;
                    break;
                }
            }
            let mut x = [0.0; 3];
            for (c, xi) in x.iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                *xi = chosen.center[c] + chosen.std * g;
            }
            x
        }
        InitialLaw::UniformBall { center, radius } => {
            let mut dir = [0.0; 3];
            let mut norm = 0.0;
            while norm == 0.0 {
                for d in dir.iter_mut() {
                    *d = rng.sample(StandardNormal);
                }
                norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let r = radius * rng.random::<f64>().powf(1.0 / 3.0);
            [
                center[0] + r * dir[0] / norm,
                center[1] + r * dir[1] / norm,
                center[2] + r * dir[2] / norm,
            ]
        }
    }
}

/// N pairwise-distinct iid positions from the law; exact collisions are
/// resampled with a fresh attempt counter.
pub fn init_particles(law: &InitialLaw, n: usize, seed: u64) -> Result<ParticleState> {
    law.validate()?;
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {n}")));
    }
    let mut positions = Array2::zeros((n, 3));
    for i in 0..n {
        let mut attempt = 0u64;
        loop {
            let x = draw_position(law, seed, i as u64, attempt);
            let distinct = (0..i).all(|j| {
                (0..3).any(|c| positions[[j, c]] != x[c])
            });
            if distinct {
                for c in 0..3 {
                    positions[[i, c]] = x[c];
                }
                break;
            }
            attempt += 1;
        }
    }
    let min_dist = min_pairwise_distance(positions.view());
    Ok(ParticleState { positions, t: 0.0, step: 0, seed, epsilon: f64::NAN, min_dist })
}

/// Rejection sampling of particle positions from a grid density.
pub fn init_particles_from_grid(mu: &GridDensity, n: usize, seed: u64) -> Result<ParticleState> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {n}")));
    }
    let bound = mu.max_value();
    if !(bound > 0.0) {
        return Err(Error::Domain("grid density has no positive mass".into()));
    }
    let half = 0.5 * mu.box_size;
    let mut positions = Array2::zeros((n, 3));
    for i in 0..n {
        let mut attempt = 0u64;
        loop {
            let mut rng = stream(seed, StreamKind::Init, i as u64, attempt);
            attempt += 1;
            let x = [
                (rng.random::<f64>() - 0.5) * mu.box_size,
                (rng.random::<f64>() - 0.5) * mu.box_size,
                (rng.random::<f64>() - 0.5) * mu.box_size,
            ];
            let dens = trilinear(&mu.values, mu.box_size, x).max(0.0);
            if rng.random::<f64>() * bound >= dens {
                continue;
            }
            if x.iter().any(|c| c.abs() >= half) {
                continue;
            }
            let distinct = (0..i).all(|j| (0..3).any(|c| positions[[j, c]] != x[c]));
            if distinct {
                for c in 0..3 {
                    positions[[i, c]] = x[c];
                }
                break;
            }
        }
    }
    let min_dist = min_pairwise_distance(positions.view());
    Ok(ParticleState { positions, t: 0.0, step: 0, seed, epsilon: f64::NAN, min_dist })
}

/// Pairwise drift b_i = (coupling/N) sum_{j != i} M grad g_(eps)(x_i - x_j),
/// by direct O(N^2) summation over unordered pairs (the kernel gradient is
/// odd, so each pair contributes opposite forces).
pub fn drift(
    positions: ArrayView2<'_, f64>,
    spec: &PotentialSpec,
    trunc: &TruncationParams,
    flow: &FlowMatrix,
    coupling: f64,
) -> Result<Array2<f64>> {
    let n = positions.nrows();
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle positions".into()));
    }
    let mut out = Array2::zeros((n, 3));
    let scale = coupling / n as f64;
    for i in 0..n {
        let xi = [positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]];
        for j in (i + 1)..n {
            let dx = [
                xi[0] - positions[[j, 0]],
                xi[1] - positions[[j, 1]],
                xi[2] - positions[[j, 2]],
            ];
            let r = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
            let factor = spec.truncated_gradient_factor(trunc, r);
            let grad = [factor * dx[0], factor * dx[1], factor * dx[2]];
            let f = flow.apply3(grad);
            for c in 0..3 {
                out[[i, c]] += scale * f[c];
                out[[j, c]] -= scale * f[c];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TruncationEvent {
    pub t: f64,
    pub min_dist: f64,
    pub old_epsilon: f64,
    pub new_epsilon: f64,
}

/// One Euler-Maruyama step:
/// x_i += b_i dt + sqrt(2 sigma dt) xi_i with per-particle counter noise.
/// Returns the squared-drift sum |b|^2 of the step (the discretization slack
/// term of the moment-of-inertia identity accumulates dt^2 of it).
pub fn step_em(
    state: &mut ParticleState,
    config: &SdeConfig,
    spec: &PotentialSpec,
    flow: &FlowMatrix,
    events: &mut Vec<TruncationEvent>,
    saw_truncation: &mut bool,
) -> Result<f64> {
    let trunc = TruncationParams::new(state.epsilon)?;
    if state.min_dist < state.epsilon {
        *saw_truncation = true;
    }
    let b = drift(state.positions.view(), spec, &trunc, flow, config.coupling)?;
    let noise_scale = (2.0 * config.sigma * config.dt).sqrt();
    let n = state.positions.nrows();
    let mut drift_sq = 0.0;
    for i in 0..n {
        let mut rng = stream(state.seed, StreamKind::StepNoise, i as u64, state.step);
        for c in 0..3 {
            let xi: f64 = rng.sample(StandardNormal);
            drift_sq += b[[i, c]] * b[[i, c]];
            state.positions[[i, c]] += b[[i, c]] * config.dt + noise_scale * xi;
        }
    }
    state.step += 1;
    state.t = state.step as f64 * config.dt;
    if state.positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "particle positions after step {} (t = {}, epsilon = {}, previous min_dist = {})",
            state.step, state.t, state.epsilon, state.min_dist
        )));
    }
    state.min_dist = min_pairwise_distance(state.positions.view());
    if config.epsilon_policy == EpsilonPolicy::HalveOnApproach
        && state.min_dist < 2.0 * state.epsilon
    {
        let old = state.epsilon;
        state.epsilon *= 0.5;
        events.push(TruncationEvent {
            t: state.t,
            min_dist: state.min_dist,
            old_epsilon: old,
            new_epsilon: state.epsilon,
        });
    }
    Ok(drift_sq)
}

/// Moment of inertia, pair energy with the truncated kernel (ordered pairs),
/// and the smallest pairwise distance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub inertia: f64,
    pub energy: f64,
    pub min_dist: f64,
}

pub fn diagnostics(state: &ParticleState, spec: &PotentialSpec) -> Diagnostics {
    let n = state.positions.nrows();
    let trunc = TruncationParams { epsilon: state.epsilon };
    let mut inertia = KahanSum::new();
    let mut energy = KahanSum::new();
    for i in 0..n {
        let xi = [
            state.positions[[i, 0]],
            state.positions[[i, 1]],
            state.positions[[i, 2]],
        ];
        inertia.add(xi.iter().map(|v| v * v).sum());
        for j in (i + 1)..n {
            let dx = [
                xi[0] - state.positions[[j, 0]],
                xi[1] - state.positions[[j, 1]],
                xi[2] - state.positions[[j, 2]],
            ];
            let r = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
            // ordered pairs: each unordered pair counts twice
            energy.add(2.0 * spec.truncated_value(&trunc, r));
        }
    }
    Diagnostics {
        inertia: inertia.value(),
        energy: energy.value(),
        min_dist: state.min_dist,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: SdeConfig,
    pub seed: u64,
    pub times: Vec<f64>,
    pub positions: Vec<Array2<f64>>,
    pub inertia: Vec<f64>,
    pub energy: Vec<f64>,
    pub min_dist: Vec<f64>,
    /// Running sum over steps of dt^2 |b|^2 at each snapshot (discretization
    /// slack of the moment-of-inertia identity).
    pub drift_square_slack: Vec<f64>,
    pub events: Vec<TruncationEvent>,
    pub final_epsilon: f64,
    pub saw_truncation: bool,
    /// Smallest pairwise distance seen at any recorded step of the run.
    pub min_dist_over_run: f64,
}

impl TrajectoryRecord {
    /// CSV columns: t,particle,x1,x2,x3
    pub fn positions_csv(&self) -> String {
        let mut out = String::from("t,particle,x1,x2,x3\n");
        for (t, snap) in self.times.iter().zip(&self.positions) {
            for i in 0..snap.nrows() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t,
                    i,
                    snap[[i, 0]],
                    snap[[i, 1]],
                    snap[[i, 2]]
                ));
            }
        }
        out
    }

    /// JSON sidecar: diagnostics series, truncation events, config echo, seed.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "times": self.times,
            "inertia": self.inertia,
            "energy": self.energy,
            "min_dist": self.min_dist,
            "drift_square_slack": self.drift_square_slack,
            "events": self.events,
            "final_epsilon": self.final_epsilon,
            "saw_truncation": self.saw_truncation,
            "min_dist_over_run": self.min_dist_over_run,
        }))?)
    }
}

/// Integrate one trajectory, recording snapshots at the configured times
/// (t = 0 and t_final always included). The truncation radius starts at
/// min(epsilon0, min_dist/2), matching the constraint under which the
/// truncated and exact dynamics coincide.
pub fn run_trajectory(
    config: &SdeConfig,
    spec: &PotentialSpec,
    flow: &FlowMatrix,
    law: &InitialLaw,
) -> Result<TrajectoryRecord> {
    let state = init_particles(law, config.n_particles, config.seed)?;
    run_trajectory_from(state, config, spec, flow)
}

pub fn run_trajectory_from(
    mut state: ParticleState,
    config: &SdeConfig,
    spec: &PotentialSpec,
    flow: &FlowMatrix,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    spec.validate()?;
    flow.validate_dissipative()?;
    state.epsilon = config.epsilon0.min(0.5 * state.min_dist);
    let steps = if config.t_final == 0.0 {
        0
    } else {
        (config.t_final / config.dt).round().max(1.0) as usize
    };
    let mut marks: Vec<usize> = config
        .snapshot_times
        .iter()
        .map(|t| ((t / config.dt).round() as usize).clamp(0, steps))
        .collect();
    marks.push(0);
    marks.push(steps);
    marks.sort_unstable();
    marks.dedup();

    let mut record = TrajectoryRecord {
        config: config.clone(),
        seed: config.seed,
        times: Vec::new(),
        positions: Vec::new(),
        inertia: Vec::new(),
        energy: Vec::new(),
        min_dist: Vec::new(),
        drift_square_slack: Vec::new(),
        events: Vec::new(),
        final_epsilon: state.epsilon,
        saw_truncation: false,
        min_dist_over_run: state.min_dist,
    };
    let mut slack = 0.0;
    let mut saw = false;
    let snap = |state: &ParticleState, slack: f64, record: &mut TrajectoryRecord| {
        let diag = diagnostics(state, spec);
        record.times.push(state.t);
        record.positions.push(state.positions.clone());
        record.inertia.push(diag.inertia);
        record.energy.push(diag.energy);
        record.min_dist.push(diag.min_dist);
        record.drift_square_slack.push(slack);
    };
    if marks.first() == Some(&0) {
        snap(&state, 0.0, &mut record);
    }
    for k in 1..=steps {
        let dsq = step_em(&mut state, config, spec, flow, &mut record.events, &mut saw)?;
        slack += config.dt * config.dt * dsq;
        record.min_dist_over_run = record.min_dist_over_run.min(state.min_dist);
        if marks.binary_search(&k).is_ok() {
            snap(&state, slack, &mut record);
        }
    }
    record.final_epsilon = state.epsilon;
    record.saw_truncation = saw;
    Ok(record)
}

/// Per-snapshot ensemble means and standard errors, with collision statistics
/// over the whole run. Aggregation is done in run order after the parallel
/// map, so results do not depend on the thread count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStatistics {
    pub times: Vec<f64>,
    pub inertia_mean: Vec<f64>,
    pub inertia_se: Vec<f64>,
    pub energy_mean: Vec<f64>,
    pub energy_se: Vec<f64>,
    pub min_dist_mean: Vec<f64>,
    pub min_dist_se: Vec<f64>,
    pub drift_slack_mean: Vec<f64>,
    /// Per-run minimum distance over the whole run.
    pub run_min_dist: Vec<f64>,
    /// Log-spaced histogram of `run_min_dist`: (upper edge, count).
    pub min_dist_histogram: Vec<(f64, usize)>,
    pub runs_requested: usize,
    pub failures: Vec<String>,
}

impl EnsembleStatistics {
    /// Fraction of trajectories whose min distance ever dropped below delta.
    pub fn collision_fraction(&self, delta: f64) -> f64 {
        if self.run_min_dist.is_empty() {
            return f64::NAN;
        }
        self.run_min_dist.iter().filter(|d| **d < delta).count() as f64
            / self.run_min_dist.len() as f64
    }
}

pub fn ensemble(
    config: &SdeConfig,
    spec: &PotentialSpec,
    flow: &FlowMatrix,
    law: &InitialLaw,
    runs: usize,
    base_seed: u64,
) -> Result<EnsembleStatistics> {
    let seeds: Vec<u64> = (0..runs as u64).map(|k| base_seed.wrapping_add(k)).collect();
    ensemble_with_seeds(config, spec, flow, law, &seeds)
}

pub fn ensemble_with_seeds(
    config: &SdeConfig,
    spec: &PotentialSpec,
    flow: &FlowMatrix,
    law: &InitialLaw,
    seeds: &[u64],
) -> Result<EnsembleStatistics> {
    if seeds.len() < 2 {
        return Err(Error::Config("ensembles need at least 2 runs".into()));
    }
    let results: Vec<Result<TrajectoryRecord>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            run_trajectory(&cfg, spec, flow, law)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in seeds.iter().zip(results) {
        match res {
            Ok(r) => records.push(r),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if records.is_empty() {
        return Err(Error::Domain(format!(
            "all {} trajectories failed; first: {}",
            seeds.len(),
            failures.first().cloned().unwrap_or_default()
        )));
    }
    let times = records[0].times.clone();
    let m = times.len();
    let column = |get: &dyn Fn(&TrajectoryRecord, usize) -> f64, idx: usize| -> Vec<f64> {
        records.iter().map(|r| get(r, idx)).collect()
    };
    let mut stats = EnsembleStatistics {
        times,
        inertia_mean: Vec::with_capacity(m),
        inertia_se: Vec::with_capacity(m),
        energy_mean: Vec::with_capacity(m),
        energy_se: Vec::with_capacity(m),
        min_dist_mean: Vec::with_capacity(m),
        min_dist_se: Vec::with_capacity(m),
        drift_slack_mean: Vec::with_capacity(m),
        run_min_dist: records.iter().map(|r| r.min_dist_over_run).collect(),
        min_dist_histogram: Vec::new(),
        runs_requested: seeds.len(),
        failures,
    };
    for idx in 0..m {
        let (im, ise) = mean_se(&column(&|r, i| r.inertia[i], idx));
        let (em, ese) = mean_se(&column(&|r, i| r.energy[i], idx));
        let (dm, dse) = mean_se(&column(&|r, i| r.min_dist[i], idx));
        let (sm, _) = mean_se(&column(&|r, i| r.drift_square_slack[i], idx));
        stats.inertia_mean.push(im);
        stats.inertia_se.push(ise);
        stats.energy_mean.push(em);
        stats.energy_se.push(ese);
        stats.min_dist_mean.push(dm);
        stats.min_dist_se.push(dse);
        stats.drift_slack_mean.push(sm);
    }
    // log-spaced histogram of per-run minima, decades from 1e-6 to 1e+2
    for exp in -6..=2 {
        let edge = 10f64.powi(exp);
        let count = stats.run_min_dist.iter().filter(|d| **d < edge).count();
        stats.min_dist_histogram.push((edge, count));
    }
    Ok(stats)
}
