//! Càdlàg integrators: `S_t = t + Σ_{k ≤ N_t} J_k` and
//! `Lⁱ_t = Bⁱ_t + Σ_{k ≤ N_t} Jⁱ_k` with `B⁰_t = t`.
//!
//! A [`DriverPath`] is a realized integrator on a uniform grid: Brownian
//! increments per step plus a jump schedule whose times sit on grid nodes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STREAM_BROWNIAN: u64 = 0;
const STREAM_JUMPS: u64 = 1;
const STREAM_BRIDGE: u64 = 2;

/// Jump times `t_1 < t_2 < …` and marks `J_n ∈ ℝ^{m+1}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpSchedule {
    times: Vec<f64>,
    marks: Vec<Vec<f64>>,
}

impl JumpSchedule {
    pub fn new(times: Vec<f64>, marks: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != marks.len() {
            return Err(Error::Schedule(format!(
                "{} jump times but {} marks",
                times.len(),
                marks.len()
            )));
        }
        if let Some(&t) = times.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Schedule(format!("jump time {t} is not a positive finite number")));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schedule("jump times must be strictly increasing".into()));
        }
        if let Some(first) = marks.first() {
            if first.is_empty() || marks.iter().any(|mk| mk.len() != first.len()) {
                return Err(Error::Schedule("all marks must have the same positive length".into()));
            }
        }
        Ok(Self { times, marks })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Schedule with scalar marks, for the deterministic integrator `S_t`.
    pub fn scalar(times: Vec<f64>, marks: Vec<f64>) -> Result<Self> {
        Self::new(times, marks.into_iter().map(|j| vec![j]).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marks(&self) -> &[Vec<f64>] {
        &self.marks
    }

    pub fn mark(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.marks[k])
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Σ_{k ≤ N_t} Jⁱ_k`.
    pub fn jump_sum(&self, component: usize, t: f64) -> f64 {
        let n = count_jumps(self, t);
        self.marks[..n].iter().map(|mk| mk[component]).sum()
    }

    fn check_mark_dim(&self, dim: usize) -> Result<()> {
        match self.marks.first() {
            Some(mk) if mk.len() != dim => Err(Error::Schedule(format!(
                "marks have length {}, the driver needs {dim}",
                mk.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// `N_t = max{n : t_n ≤ t}`, zero when no jump has happened.
pub fn count_jumps(schedule: &JumpSchedule, t: f64) -> usize {
    schedule.times.partition_point(|&tn| tn <= t)
}

/// How jump times that land on an occupied grid node are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapPolicy {
    /// Two jumps on one node is an error (user-supplied schedules).
    Reject,
    /// Move the later jump to the next free node (sampled schedules); jumps
    /// pushed past the horizon are packed back onto the last free nodes.
    Perturb,
}

/// Number of grid steps of size `step` covering `[0, horizon]`.
pub fn grid_steps(step: f64, horizon: f64) -> Result<usize> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Grid(format!("step {step} must be positive")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Grid(format!("horizon {horizon} must be positive")));
    }
    let n = (horizon / step).round();
    if n < 1.0 || (n * step - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Grid(format!("horizon {horizon} is not a multiple of step {step}")));
    }
    Ok(n as usize)
}

/// A realized integrator `L = (L⁰, …, Lᵐ)` on a uniform grid over `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriverPath {
    step: f64,
    steps: usize,
    m: usize,
    /// Row-major `steps × m` Brownian increments `ΔB¹ … ΔBᵐ`.
    increments: Vec<f64>,
    /// Jumps with times already moved onto grid nodes.
    schedule: JumpSchedule,
    jump_nodes: Vec<usize>,
}

impl DriverPath {
    pub fn new(
        step: f64,
        horizon: f64,
        m: usize,
        increments: Vec<f64>,
        schedule: &JumpSchedule,
        policy: SnapPolicy,
    ) -> Result<Self> {
        let steps = grid_steps(step, horizon)?;
        if increments.len() != steps * m {
            return Err(Error::Grid(format!(
                "expected {} Brownian increments, got {}",
                steps * m,
                increments.len()
            )));
        }
        let mut path = Self {
            step,
            steps,
            m,
            increments,
            schedule: JumpSchedule::empty(),
            jump_nodes: Vec::new(),
        };
        path.snap(schedule, policy)?;
        Ok(path)
    }

    fn snap(&mut self, schedule: &JumpSchedule, policy: SnapPolicy) -> Result<()> {
        schedule.check_mark_dim(self.m + 1)?;
        let horizon = self.horizon();
        let mut nodes: Vec<usize> = Vec::new();
        let mut marks = Vec::new();
        for (&t, mk) in schedule.times.iter().zip(&schedule.marks) {
            if t > horizon + 1e-12 * horizon {
                break;
            }
            let mut node = ((t / self.step).round() as usize).clamp(1, self.steps);
            if let Some(&prev) = nodes.last() {
                if node <= prev {
                    match policy {
                        SnapPolicy::Reject => {
                            return Err(Error::Schedule(format!(
                                "jump at t = {t} is less than one grid step after the previous jump"
                            )))
                        }
                        SnapPolicy::Perturb => node = prev + 1,
                    }
                }
            }
            nodes.push(node);
            marks.push(mk.clone());
        }
        // perturbation can push the last jumps past T: pull them back in order
        let mut cap = self.steps;
        for node in nodes.iter_mut().rev() {
            if *node <= cap {
                break;
            }
            if cap == 0 {
                return Err(Error::Schedule("more jumps than grid nodes in the horizon".into()));
            }
            *node = cap;
            cap -= 1;
        }
        let times = nodes.iter().map(|&k| k as f64 * self.step).collect();
        self.schedule = JumpSchedule::new(times, marks)?;
        self.jump_nodes = nodes;
        Ok(())
    }

    /// The same Brownian increments with a different jump schedule.
    pub fn with_schedule(mut self, schedule: &JumpSchedule, policy: SnapPolicy) -> Result<Self> {
        self.snap(schedule, policy)?;
        Ok(self)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.step
    }

    /// Number of Brownian components.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn schedule(&self) -> &JumpSchedule {
        &self.schedule
    }

    pub fn jump_nodes(&self) -> &[usize] {
        &self.jump_nodes
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Index into the schedule of the jump at grid node `k`, if any.
    pub fn jump_at_node(&self, k: usize) -> Option<usize> {
        self.jump_nodes.binary_search(&k).ok()
    }

    /// `ΔLⁱ` over grid step `k` without jumps: `h` for `i = 0`.
    #[inline]
    pub fn increment(&self, k: usize, component: usize) -> f64 {
        if component == 0 {
            self.step
        } else {
            self.increments[k * self.m + component - 1]
        }
    }

    /// `Bⁱ_t`: exact on nodes, linear between them. `B⁰_t = t`.
    pub fn brownian(&self, component: usize, t: f64) -> f64 {
        if component == 0 {
            return t;
        }
        let pos = (t / self.step).clamp(0.0, self.steps as f64);
        let k = (pos + 1e-9).floor() as usize;
        let k = k.min(self.steps);
        let node: f64 = (0..k).map(|j| self.increment(j, component)).sum();
        if k == self.steps {
            return node;
        }
        let frac = (pos - k as f64).max(0.0);
        node + frac * self.increment(k, component)
    }

    /// `Lⁱ_t = Bⁱ_t + Σ_{k ≤ N_t} Jⁱ_k`.
    pub fn value(&self, component: usize, t: f64) -> f64 {
        self.brownian(component, t) + self.schedule.jump_sum(component, t)
    }

    /// Halves the step by Brownian-bridge interpolation of every increment.
    /// The coarse increments are kept (up to rounding) as sums of the halves.
    pub fn refine_bridge(&self, seed: u64) -> DriverPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_BRIDGE);
        let sd = (self.step / 4.0).sqrt();
        let mut increments = vec![0.0; 2 * self.steps * self.m];
        for k in 0..self.steps {
            for i in 0..self.m {
                let total = self.increments[k * self.m + i];
                let z: f64 = rng.sample(StandardNormal);
                let first = 0.5 * total + sd * z;
                increments[2 * k * self.m + i] = first;
                increments[(2 * k + 1) * self.m + i] = total - first;
            }
        }
        let step = 0.5 * self.step;
        let jump_nodes: Vec<usize> = self.jump_nodes.iter().map(|k| 2 * k).collect();
        let schedule = JumpSchedule {
            times: jump_nodes.iter().map(|&k| k as f64 * step).collect(),
            marks: self.schedule.marks.clone(),
        };
        DriverPath {
            step,
            steps: 2 * self.steps,
            m: self.m,
            increments,
            schedule,
            jump_nodes,
        }
    }

    /// Sums `factor` consecutive increments. Jumps must sit on coarse nodes.
    pub fn coarsen(&self, factor: usize) -> Result<DriverPath> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Grid(format!("cannot coarsen {} steps by {factor}", self.steps)));
        }
        if self.jump_nodes.iter().any(|k| k % factor != 0) {
            return Err(Error::Grid("jump nodes do not lie on the coarse grid".into()));
        }
        let steps = self.steps / factor;
        let step = self.step * factor as f64;
        let mut increments = vec![0.0; steps * self.m];
        for k in 0..steps {
            for i in 0..self.m {
                increments[k * self.m + i] = (0..factor).map(|j| self.increments[(k * factor + j) * self.m + i]).sum();
            }
        }
        let jump_nodes: Vec<usize> = self.jump_nodes.iter().map(|k| k / factor).collect();
        let schedule = JumpSchedule {
            times: jump_nodes.iter().map(|&k| k as f64 * step).collect(),
            marks: self.schedule.marks.clone(),
        };
        Ok(DriverPath {
            step,
            steps,
            m: self.m,
            increments,
            schedule,
            jump_nodes,
        })
    }
}

/// `S_t = t + Σ_{k ≤ N_t} J_k` on a grid of step `step`.
pub fn deterministic_integrator(schedule: &JumpSchedule, horizon: f64, step: f64) -> Result<DriverPath> {
    DriverPath::new(step, horizon, 0, Vec::new(), schedule, SnapPolicy::Reject)
}

/// Independent `N(0, h)` increments for `m` Brownian components, no jumps.
pub fn sample_brownian(seed: u64, step: f64, horizon: f64, m: usize) -> Result<DriverPath> {
    let steps = grid_steps(step, horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_BROWNIAN);
    let sd = step.sqrt();
    let increments = (0..steps * m)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect();
    DriverPath::new(step, horizon, m, increments, &JumpSchedule::empty(), SnapPolicy::Reject)
}

/// Distribution of jump marks in `ℝ^{m+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkLaw {
    Constant { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

impl MarkLaw {
    pub fn dim(&self) -> usize {
        match self {
            MarkLaw::Constant { value } => value.len(),
            MarkLaw::Gaussian { mean, .. } => mean.len(),
            MarkLaw::Uniform { low, .. } => low.len(),
        }
    }

    fn sampler(&self) -> Result<MarkSampler> {
        match self {
            MarkLaw::Constant { value } => Ok(MarkSampler::Constant(value.clone())),
            MarkLaw::Gaussian { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("Gaussian mark covariance must be {d}×{d}")));
                }
                let c = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                let chol = c
                    .cholesky()
                    .ok_or_else(|| Error::Config("Gaussian mark covariance is not positive definite".into()))?;
                Ok(MarkSampler::Gaussian(DVector::from_column_slice(mean), chol.l()))
            }
            MarkLaw::Uniform { low, high } => {
                if low.len() != high.len() || low.iter().zip(high).any(|(a, b)| !(b >= a)) {
                    return Err(Error::Config("uniform mark box needs low ≤ high per component".into()));
                }
                Ok(MarkSampler::Uniform(low.clone(), high.clone()))
            }
        }
    }
}

enum MarkSampler {
    Constant(Vec<f64>),
    Gaussian(DVector<f64>, DMatrix<f64>),
    Uniform(Vec<f64>, Vec<f64>),
}

impl MarkSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            MarkSampler::Constant(v) => v.clone(),
            MarkSampler::Gaussian(mean, l) => {
                let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                (mean + l * z).iter().copied().collect()
            }
            MarkSampler::Uniform(lo, hi) => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| if a == b { a } else { rng.random_range(a..b) })
                .collect(),
        }
    }
}

/// Jump times of a rate-`rate` Poisson process on `(0, T]` with i.i.d. marks.
pub fn sample_poisson_schedule(seed: u64, rate: f64, horizon: f64, law: &MarkLaw, m: usize) -> Result<JumpSchedule> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::Config(format!("jump rate {rate} must be a nonnegative number")));
    }
    if law.dim() != m + 1 {
        return Err(Error::Config(format!(
            "mark law has dimension {}, expected m + 1 = {}",
            law.dim(),
            m + 1
        )));
    }
    let sampler = law.sampler()?;
    if rate == 0.0 {
        return Ok(JumpSchedule::empty());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_JUMPS);
    let gaps = Exp::new(rate).map_err(|e| Error::Config(e.to_string()))?;
    let mut times = Vec::new();
    let mut marks = Vec::new();
    let mut t = 0.0;
    loop {
        t += rng.sample(gaps);
        if t > horizon {
            break;
        }
        times.push(t);
        marks.push(sampler.sample(&mut rng));
    }
    JumpSchedule::new(times, marks)
}

/// Brownian motion plus a Poisson jump schedule, jumps snapped to the grid.
pub fn sample_driver(
    seed: u64,
    step: f64,
    horizon: f64,
    m: usize,
    rate: f64,
    law: &MarkLaw,
) -> Result<DriverPath> {
    let schedule = sample_poisson_schedule(seed, rate, horizon, law, m)?;
    sample_brownian(seed, step, horizon, m)?.with_schedule(&schedule, SnapPolicy::Perturb)
}

/// Seed of trajectory `index` in an ensemble with base seed `base`.
/// Trajectory 0 uses the base seed itself.
pub fn trajectory_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}
