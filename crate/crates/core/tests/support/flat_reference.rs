//! A plain-array solver for delay equations with Marcus jumps in flat space,
//! written without any of the geometric machinery. With affine fields
//! `Aⁱ(x) = Mⁱ x + bⁱ` it is an independent oracle for the manifold solver
//! on `euclidean(n)`.
//!
//! Scheme: the delayed coefficient is interpolated linearly between grid
//! nodes (left limit at the end of a step). Heun's corrector is therefore
//! `x + ½ Σᵢ (Aⁱ(x_{k−m_d}) + Aⁱ(x⁻_{k+1−m_d})) ΔLⁱ`, and RK4 weights the
//! endpoints 1/6 and the midpoint average 4/6. Jumps solve
//! `y' = Σₖ Jᵏ Aᵏ(y)` on `[0, 1]` with classical RK4.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sddej::drivers::{sample_brownian, DriverPath, JumpSchedule, SnapPolicy};
use sddej::manifold::{euclidean, VectorFieldSpec};
use sddej::solver::{EquationSpec, Scheme, SolverConfig};
use sddej::transport::PathSegment;

pub struct Affine {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl Affine {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + b)
            .collect()
    }
}

pub struct FlatProblem {
    pub n: usize,
    pub delay_steps: usize,
    pub step: f64,
    pub steps: usize,
    /// History `a + (t + d) v` on `[−d, 0]`.
    pub history_start: Vec<f64>,
    pub history_velocity: Vec<f64>,
    pub fields: Vec<Affine>,
    /// Row-major `steps × m` Brownian increments.
    pub increments: Vec<f64>,
    /// `(grid node, mark)`.
    pub jumps: Vec<(usize, Vec<f64>)>,
    pub rk4: bool,
    pub fill_steps: usize,
}

pub struct FlatRun {
    pub post: Vec<Vec<f64>>,
    pub left: Vec<Option<Vec<f64>>>,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl FlatProblem {
    fn m(&self) -> usize {
        self.fields.len() - 1
    }

    fn marcus(&self, z: &[f64], mark: &[f64]) -> Vec<f64> {
        let rhs = |y: &[f64]| {
            let mut out = vec![0.0; self.n];
            for (f, &j) in self.fields.iter().zip(mark) {
                axpy(&mut out, j, &f.apply(y));
            }
            out
        };
        let ds = 1.0 / self.fill_steps as f64;
        let mut y = z.to_vec();
        for _ in 0..self.fill_steps {
            let k1 = rhs(&y);
            let mut y2 = y.clone();
            axpy(&mut y2, 0.5 * ds, &k1);
            let k2 = rhs(&y2);
            let mut y3 = y.clone();
            axpy(&mut y3, 0.5 * ds, &k2);
            let k3 = rhs(&y3);
            let mut y4 = y.clone();
            axpy(&mut y4, ds, &k3);
            let k4 = rhs(&y4);
            for i in 0..self.n {
                y[i] += ds / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    }

    pub fn solve(&self) -> FlatRun {
        let md = self.delay_steps;
        let d = md as f64 * self.step;
        let total = md + self.steps + 1;
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(total);
        let mut left: Vec<Option<Vec<f64>>> = vec![None; total];
        for idx in 0..=md {
            let t = (idx as f64 - md as f64) * self.step;
            let mut x = self.history_start.clone();
            axpy(&mut x, t + d, &self.history_velocity);
            post.push(x);
        }
        let m = self.m();
        for k in 0..self.steps {
            let x = post[k + md].clone();
            let delayed_start = &post[k];
            let delayed_end = left[k + 1].as_ref().unwrap_or(&post[k + 1]).clone();
            let mut next = x.clone();
            for (i, f) in self.fields.iter().enumerate() {
                let dl = if i == 0 { self.step } else { self.increments[k * m + i - 1] };
                let a = f.apply(delayed_start);
                let b = f.apply(&delayed_end);
                if self.rk4 {
                    for c in 0..self.n {
                        let mid = 0.5 * (a[c] + b[c]);
                        next[c] += dl / 6.0 * (a[c] + 4.0 * mid + b[c]);
                    }
                } else {
                    for c in 0..self.n {
                        next[c] += 0.5 * (a[c] + b[c]) * dl;
                    }
                }
            }
            if let Some((_, mark)) = self.jumps.iter().find(|(node, _)| *node == k + 1) {
                let after = self.marcus(&next, mark);
                left[k + 1 + md] = Some(next);
                next = after;
            }
            post.push(next);
        }
        FlatRun { post, left }
    }
}

/// A random flat configuration, both as a plain problem and as inputs to the
/// geometric solver.
pub struct FlatCase {
    pub problem: FlatProblem,
    pub equation: EquationSpec,
    pub driver: DriverPath,
    pub config: SolverConfig,
}

pub fn random_case(seed: u64, step: f64) -> FlatCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let m = rng.random_range(0..=2);
    let horizon = rng.random_range(1..=5) as f64;
    let delay = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
    let steps = (horizon / step).round() as usize;
    let delay_steps = (delay / step).round() as usize;
    let mut uniform = |k: usize, r: f64| (0..k).map(|_| rng.random_range(-r..r)).collect::<Vec<f64>>();
    let history_start = uniform(n, 1.0);
    let history_velocity = uniform(n, 1.0);
    let fields: Vec<Affine> = (0..=m)
        .map(|_| Affine {
            matrix: (0..n).map(|_| uniform(n, 0.5)).collect(),
            offset: uniform(n, 1.0),
        })
        .collect();
    let jump_count = rng.random_range(0..=5);
    let mut nodes: Vec<usize> = (0..jump_count).map(|_| rng.random_range(1..=steps)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let marks: Vec<Vec<f64>> = nodes.iter().map(|_| (0..=m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let rk4 = m == 0 && rng.random_bool(0.5);

    let schedule = JumpSchedule::new(nodes.iter().map(|&k| k as f64 * step).collect(), marks.clone()).unwrap();
    let driver = sample_brownian(seed, step, horizon, m)
        .unwrap()
        .with_schedule(&schedule, SnapPolicy::Reject)
        .unwrap();
    let specs = fields
        .iter()
        .map(|f| {
            VectorFieldSpec::affine(
                DMatrix::from_fn(n, n, |i, j| f.matrix[i][j]),
                DVector::from_column_slice(&f.offset),
            )
        })
        .collect();
    let a = DVector::from_column_slice(&history_start);
    let v = DVector::from_column_slice(&history_velocity);
    let curve = PathSegment::sample(-delay, 0.0, 4, |t| (&a + &v * (t + delay), v.clone())).unwrap();
    let equation = EquationSpec::new(euclidean(n).unwrap(), specs, delay, curve).unwrap();
    let scheme = if rk4 { Scheme::Rk4Deterministic } else { Scheme::HeunStratonovich };
    let config = SolverConfig::new(step, horizon, scheme);
    let problem = FlatProblem {
        n,
        delay_steps,
        step,
        steps,
        history_start,
        history_velocity,
        fields,
        increments: driver.increments().to_vec(),
        jumps: driver.jump_nodes().iter().copied().zip(marks).collect(),
        rk4,
        fill_steps: config.fictitious_steps,
    };
    FlatCase {
        problem,
        equation,
        driver,
        config,
    }
}
