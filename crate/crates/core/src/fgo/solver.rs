use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{so3_exp, Mat3, Quat, Vec3};
use crate::model::{compose_state, ErrorVector, NominalState};

use super::factors::{
    bias_walk_jacobians, bias_walk_residual, corner_residual_jacobians, extrinsics_jacobian, extrinsics_residual,
    imu_residual_jacobians, prior_jacobian, prior_residual, Vec9,
};
use super::preint::{Mat9, PreintegratedImu};
use super::{FactorGraph, FgoError};

type Mat15 = SMatrix<f64, 15, 15>;
type Mat15x3 = SMatrix<f64, 15, 3>;
type Mat15x4 = SMatrix<f64, 15, 4>;

const RELATIVE_DECREASE_TOL: f64 = 1e-8;
const GRADIENT_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-12;
const MAX_SINGULAR_ESCALATIONS: usize = 10;
const MAX_LAMBDA: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RelativeDecrease,
    Gradient,
    SmallStep,
    /// Damping grew past its limit without finding a cost decrease.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub cost: f64,
    pub candidate_cost: f64,
    pub lambda: f64,
    pub accepted: bool,
    pub gradient_norm: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgoResult {
    pub keyframes: Vec<NominalState>,
    pub ext_rotation: Quat,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub termination: Termination,
    pub log: Vec<IterationLog>,
}

impl FgoResult {
    pub fn converged(&self) -> bool {
        !matches!(self.termination, Termination::MaxIterations)
    }
}

/// `(ρ(s), ρ'(s))` for the Huber loss on a squared whitened norm `s`.
fn huber(s: f64, delta: f64) -> (f64, f64) {
    let e = s.sqrt();
    if e <= delta {
        (s, 1.0)
    } else {
        (2.0 * delta * e - delta * delta, delta / e)
    }
}

/// Inverse lower Cholesky factor of each preintegration covariance, fixed
/// for the whole optimization.
fn imu_whitening(preints: &[PreintegratedImu]) -> Vec<Mat9> {
    preints
        .iter()
        .map(|p| {
            let l = p
                .cov9
                .cholesky()
                .map(|c| c.l())
                .unwrap_or_else(|| Mat9::from_diagonal(&p.cov9.diagonal().map(|v| v.max(1e-14).sqrt())));
            l.solve_lower_triangular(&Mat9::identity()).unwrap_or_else(Mat9::identity)
        })
        .collect()
}

struct Normal {
    diag: Vec<Mat15>,
    upper: Vec<Mat15>,
    border: Vec<Mat15x3>,
    ee: Mat3,
    gx: Vec<ErrorVector>,
    ge: Vec3,
}

impl Normal {
    fn zeros(n: usize) -> Self {
        Self {
            diag: vec![Mat15::zeros(); n],
            upper: vec![Mat15::zeros(); n.saturating_sub(1)],
            border: vec![Mat15x3::zeros(); n],
            ee: Mat3::zeros(),
            gx: vec![ErrorVector::zeros(); n],
            ge: Vec3::zeros(),
        }
    }

    fn gradient_norm(&self) -> f64 {
        self.gx.iter().map(|g| g.amax()).fold(self.ge.amax(), f64::max)
    }
}

struct Problem<'a> {
    graph: &'a FactorGraph,
    imu_w: Vec<Mat9>,
}

impl Problem<'_> {
    fn refresh(&self, preints: &[PreintegratedImu], states: &[NominalState]) -> Vec<PreintegratedImu> {
        preints
            .iter()
            .zip(states)
            .map(|(p, x)| {
                if p.bias_a == x.b_a && p.bias_w == x.b_w {
                    p.clone()
                } else {
                    p.repreintegrate(x.b_a, x.b_w)
                }
            })
            .collect()
    }

    /// Half the robustified sum of squared whitened residuals; fills the
    /// Gauss-Newton system when `normal` is given.
    fn evaluate(
        &self,
        states: &[NominalState],
        ext: &Quat,
        preints: &[PreintegratedImu],
        mut normal: Option<&mut Normal>,
    ) -> f64 {
        let g = self.graph;
        let w = &g.weights;
        let gravity = g.noise.gravity;
        let refine = g.refine_extrinsics;
        let mut cost = 0.0;

        for (i, pre) in preints.iter().enumerate() {
            let (r, j0, j1) = imu_residual_jacobians(&states[i], &states[i + 1], pre, &gravity);
            let wm = &self.imu_w[i];
            let rw: Vec9 = wm * r;
            cost += 0.5 * rw.norm_squared();
            if let Some(n) = normal.as_deref_mut() {
                let a = wm * j0;
                let b = wm * j1;
                n.diag[i] += a.transpose() * a;
                n.diag[i + 1] += b.transpose() * b;
                n.upper[i] += a.transpose() * b;
                n.gx[i] += a.transpose() * rw;
                n.gx[i + 1] += b.transpose() * rw;
            }
            if w.bias_walk {
                let dt = pre.dt_total;
                let sa = g.noise.sigma_ba * dt.sqrt();
                let sw = g.noise.sigma_bw * dt.sqrt();
                let scale = SVector::<f64, 6>::new(1.0 / sa, 1.0 / sa, 1.0 / sa, 1.0 / sw, 1.0 / sw, 1.0 / sw);
                let rw = bias_walk_residual(&states[i], &states[i + 1]).component_mul(&scale);
                cost += 0.5 * rw.norm_squared();
                if let Some(n) = normal.as_deref_mut() {
                    let (j0, j1) = bias_walk_jacobians();
                    let s = SMatrix::<f64, 6, 6>::from_diagonal(&scale);
                    let a = s * j0;
                    let b = s * j1;
                    n.diag[i] += a.transpose() * a;
                    n.diag[i + 1] += b.transpose() * b;
                    n.upper[i] += a.transpose() * b;
                    n.gx[i] += a.transpose() * rw;
                    n.gx[i + 1] += b.transpose() * rw;
                }
            }
        }

        for (i, kf) in g.keyframes.iter().enumerate() {
            let x = &states[i];
            for z in &kf.measurements {
                let Ok((r, jx, je)) = corner_residual_jacobians(x, ext, &g.p_bc, z) else {
                    continue;
                };
                let rw = r / w.sigma_corner;
                let (rho, dw) = huber(rw.norm_squared(), w.huber_delta_corner);
                cost += 0.5 * rho;
                if let Some(n) = normal.as_deref_mut() {
                    let jx = jx / w.sigma_corner;
                    let je = je / w.sigma_corner;
                    n.diag[i] += jx.transpose() * jx * dw;
                    n.gx[i] += jx.transpose() * rw * dw;
                    if refine {
                        n.border[i] += jx.transpose() * je * dw;
                        n.ee += je.transpose() * je * dw;
                        n.ge += je.transpose() * rw * dw;
                    }
                }
            }
            if let Some(prior) = &kf.vins_prior {
                let mut scale = SVector::<f64, 6>::repeat(1.0 / w.sigma_prior_p);
                scale.fixed_rows_mut::<3>(3).fill(1.0 / w.sigma_prior_theta);
                let rw = prior_residual(x, prior).component_mul(&scale);
                cost += 0.5 * rw.norm_squared();
                if let Some(n) = normal.as_deref_mut() {
                    let j = SMatrix::<f64, 6, 6>::from_diagonal(&scale) * prior_jacobian(x, prior);
                    n.diag[i] += j.transpose() * j;
                    n.gx[i] += j.transpose() * rw;
                }
            }
        }

        if refine {
            let rw = extrinsics_residual(ext, &g.ext_nominal) / w.sigma_ext;
            cost += 0.5 * rw.norm_squared();
            if let Some(n) = normal.as_deref_mut() {
                let j = extrinsics_jacobian(ext, &g.ext_nominal) / w.sigma_ext;
                n.ee += j.transpose() * j;
                n.ge += j.transpose() * rw;
            }
        }
        cost
    }
}

fn damped(m: &Mat15, lambda: f64) -> Mat15 {
    let mut out = *m;
    for k in 0..15 {
        out[(k, k)] += lambda * m[(k, k)].max(1e-9);
    }
    out
}

/// Solves `(H + λD) δ = −g` exploiting the block-tridiagonal keyframe
/// structure; the extrinsics block is eliminated through a 3×3 Schur
/// complement.
fn solve(n: &Normal, lambda: f64, refine: bool) -> Option<(Vec<ErrorVector>, Vec3)> {
    let k = n.diag.len();
    let mut l_diag: Vec<Mat15> = Vec::with_capacity(k);
    let mut l_sub: Vec<Mat15> = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..k {
        let mut m = damped(&n.diag[i], lambda);
        if i > 0 {
            let s = &l_sub[i - 1];
            m -= s * s.transpose();
        }
        let l = m.cholesky()?.l();
        if i + 1 < k {
            l_sub.push(l.solve_lower_triangular(&n.upper[i])?.transpose());
        }
        l_diag.push(l);
    }

    let rhs = |i: usize| {
        let mut b = Mat15x4::zeros();
        b.set_column(0, &(-n.gx[i]));
        b.fixed_columns_mut::<3>(1).copy_from(&n.border[i]);
        b
    };
    let mut y: Vec<Mat15x4> = Vec::with_capacity(k);
    for i in 0..k {
        let mut b = rhs(i);
        if i > 0 {
            b -= l_sub[i - 1] * y[i - 1];
        }
        y.push(l_diag[i].solve_lower_triangular(&b)?);
    }
    let mut x = vec![Mat15x4::zeros(); k];
    for i in (0..k).rev() {
        let mut b = y[i];
        if i + 1 < k {
            b -= l_sub[i].transpose() * x[i + 1];
        }
        x[i] = l_diag[i].tr_solve_lower_triangular(&b)?;
    }

    let mut de = Vec3::zeros();
    if refine {
        let mut s = n.ee;
        for d in 0..3 {
            s[(d, d)] += lambda * n.ee[(d, d)].max(1e-9);
        }
        let mut r = -n.ge;
        for i in 0..k {
            let bt = n.border[i].transpose();
            s -= bt * x[i].fixed_columns::<3>(1);
            r -= bt * x[i].column(0);
        }
        de = s.cholesky()?.solve(&r);
    }
    let dx = x
        .iter()
        .map(|xi| xi.column(0) - xi.fixed_columns::<3>(1) * de)
        .collect();
    Some((dx, de))
}

/// Total cost and its gradient with respect to the keyframe error states and
/// the extrinsics perturbation, at the graph's current values.
pub fn cost_and_gradient(graph: &FactorGraph) -> (f64, Vec<ErrorVector>, Vec3) {
    let problem = Problem {
        graph,
        imu_w: imu_whitening(&graph.preints),
    };
    let states = graph.states();
    let preints = problem.refresh(&graph.preints, &states);
    let mut n = Normal::zeros(states.len());
    let cost = problem.evaluate(&states, &graph.ext_rotation, &preints, Some(&mut n));
    (cost, n.gx, n.ge)
}

/// Levenberg-Marquardt on the product manifold of keyframe states and the
/// camera rotation. Preintegrations are rebuilt from their samples whenever a
/// keyframe bias moves; the covariance weights stay at their initial values.
pub fn optimize(graph: &FactorGraph, max_iters: usize, lambda_init: f64) -> Result<FgoResult, FgoError> {
    let problem = Problem {
        graph,
        imu_w: imu_whitening(&graph.preints),
    };
    let mut states = graph.states();
    let mut ext = graph.ext_rotation;
    let mut preints = problem.refresh(&graph.preints, &states);
    let mut normal = Normal::zeros(states.len());
    let mut cost = problem.evaluate(&states, &ext, &preints, Some(&mut normal));
    let initial_cost = cost;
    let mut lambda = lambda_init.max(1e-12);
    let mut log = Vec::new();
    let mut accepted_steps = 0;
    let mut termination = Termination::MaxIterations;

    'outer: for iteration in 0..max_iters {
        let gradient_norm = normal.gradient_norm();
        if gradient_norm < GRADIENT_TOL {
            termination = Termination::Gradient;
            break;
        }
        let mut escalations = 0;
        loop {
            let Some((dx, de)) = solve(&normal, lambda, graph.refine_extrinsics) else {
                escalations += 1;
                if escalations > MAX_SINGULAR_ESCALATIONS {
                    return Err(FgoError::SingularNormalEquations);
                }
                lambda *= 10.0;
                continue;
            };
            let step_norm = dx.iter().map(|d| d.amax()).fold(de.amax(), f64::max);
            let cand_states: Vec<NominalState> = states.iter().zip(&dx).map(|(x, d)| compose_state(x, d)).collect();
            let cand_ext = if graph.refine_extrinsics { ext * so3_exp(&de) } else { ext };
            let cand_preints = problem.refresh(&preints, &cand_states);
            let cand_cost = problem.evaluate(&cand_states, &cand_ext, &cand_preints, None);
            let accepted = cand_cost.is_finite() && cand_cost <= cost;
            log.push(IterationLog {
                iteration,
                cost,
                candidate_cost: cand_cost,
                lambda,
                accepted,
                gradient_norm,
                step_norm,
            });
            if accepted {
                let decrease = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                states = cand_states;
                ext = cand_ext;
                preints = cand_preints;
                normal = Normal::zeros(states.len());
                cost = problem.evaluate(&states, &ext, &preints, Some(&mut normal));
                accepted_steps += 1;
                lambda = (lambda / 10.0).max(1e-12);
                if decrease < RELATIVE_DECREASE_TOL {
                    termination = Termination::RelativeDecrease;
                    break 'outer;
                }
                if step_norm < STEP_TOL {
                    termination = Termination::SmallStep;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }

    Ok(FgoResult {
        keyframes: states,
        ext_rotation: ext,
        initial_cost,
        final_cost: cost,
        gradient_norm: normal.gradient_norm(),
        iterations: accepted_steps,
        termination,
        log,
    })
}
